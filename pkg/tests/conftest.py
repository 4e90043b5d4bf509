"""
Shared fixtures for tests.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pytest
from click.testing import CliRunner, Result

from proofpipe.cli import cli
from proofpipe.config import CONFIG_ENVVAR, PipelineConfig
from proofpipe.core import Prompt, PromptKind, RolloutGroup, Trajectory, group_stats
from proofpipe.records import write_jsonl
from proofpipe.sampler import SamplerConfig
from proofpipe.simpolicy import ToyPolicy
from proofpipe.training import TaskConfig, TrainConfig

VOCAB_SIZE = 6
SMALL = PipelineConfig(
    task=TaskConfig(vocab_size=3, target=(1, 2), verifiable_prompts=12, nonverifiable_prompts=4),
    sampler=SamplerConfig(prompt_batch=4, oversample_batch=6, samples_per_prompt=4),
    train=TrainConfig(coarse_steps=3, refined_steps=3, learning_rate=0.5),
)


def with_train(cfg: PipelineConfig, **changes: int) -> PipelineConfig:
    """
    ``cfg`` with some training schedule fields replaced
    """
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))


def make_trajectory(
    prompt_id: str,
    tokens: Sequence[int],
    reward: float | None = None,
    policy: ToyPolicy | None = None,
    source_policy: int = 0,
) -> Trajectory:
    """
    A trajectory whose sampling log-probabilities come from ``policy``
    """
    policy = policy if policy is not None else ToyPolicy.uniform(VOCAB_SIZE)
    logprobs = policy.logprob((), tokens)
    return Trajectory(
        prompt_id=prompt_id,
        tokens=tuple(int(token) for token in tokens),
        sampling_logprobs=tuple(float(lp) for lp in logprobs),
        source_policy=source_policy,
        reward=reward,
        text="\\boxed{" + " ".join(str(token) for token in tokens) + "}",
    )


def make_group(
    prompt_id: str,
    rewards: Sequence[float],
    rng: np.random.Generator,
    policy: ToyPolicy | None = None,
    max_len: int = 8,
) -> RolloutGroup:
    """
    A scored group of random distinct-ish responses
    """
    members = []
    for reward in rewards:
        length = int(rng.integers(1, max_len + 1))
        tokens = rng.integers(0, VOCAB_SIZE, size=length).tolist()
        members.append(make_trajectory(prompt_id, tokens, reward=reward, policy=policy))
    return group_stats(members)


@dataclass
class ToyFixture:
    """
    Testing Fixture Data Container
    """

    __test__ = False

    workspace: pathlib.Path
    policy: ToyPolicy
    rng: np.random.Generator

    prompts: list[Prompt] = field(init=False)
    cli_runner: CliRunner = field(init=False)

    def __post_init__(self) -> None:
        """
        Post Init
        """
        self.prompts = [
            Prompt(
                id=f"q{index}",
                text=f"Problem {index}",
                kind=PromptKind.VERIFIABLE,
                reference_answer="1 2 3 4",
            )
            for index in range(16)
        ]
        self.cli_runner = CliRunner()

    def write_json(self, name: str, data: Any) -> pathlib.Path:
        """
        Write a JSON file into the workspace
        """
        path = self.workspace / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    def write_jsonl(self, name: str, records: Sequence[dict[str, Any]]) -> pathlib.Path:
        """
        Write a JSONL file into the workspace
        """
        path = self.workspace / name
        write_jsonl(path, records)
        return path

    def write_text(self, name: str, text: str) -> pathlib.Path:
        """
        Write a text file into the workspace
        """
        path = self.workspace / name
        path.write_text(text, encoding="utf-8")
        return path

    def cli_invoke(self, args: list[str], env: dict[str, str] | None = None) -> Result:
        """
        Invoke the CLI
        """
        invoke_kwargs: dict[str, Any] = {"args": args}
        if env:
            invoke_kwargs["env"] = env
        return self.cli_runner.invoke(cli, **invoke_kwargs)


@pytest.fixture
def rng() -> np.random.Generator:
    """
    Seeded generator
    """
    return np.random.default_rng(20240601)


@pytest.fixture
def toy_policy(rng: np.random.Generator) -> ToyPolicy:
    """
    Random bigram policy over six tokens
    """
    return ToyPolicy.random(VOCAB_SIZE, rng)


@pytest.fixture
def toy(tmp_path: pathlib.Path, toy_policy: ToyPolicy, rng: np.random.Generator) -> ToyFixture:
    """
    proofpipe testing fixture
    """
    return ToyFixture(workspace=tmp_path, policy=toy_policy, rng=rng)


@pytest.fixture(autouse=True)
def proofpipe_config_unset(monkeypatch: pytest.MonkeyPatch) -> None:
    """
    Delete the PROOFPIPE_CONFIG environment variable
    """
    monkeypatch.delenv(CONFIG_ENVVAR, raising=False)
