"""
Domain types shared across proofpipe
"""

from __future__ import annotations

import dataclasses
import enum
import math
import zlib
from typing import Any, Iterable, Sequence

import numpy as np

from proofpipe.exceptions import (
    DuplicatePromptError,
    EmptyInputError,
    InvalidPromptError,
    MixedPromptError,
    UnscoredError,
)


class PromptKind(str, enum.Enum):
    """
    Prompt pool membership
    """

    VERIFIABLE = "verifiable"
    NONVERIFIABLE = "nonverifiable"
    REFINEMENT = "refinement"


@dataclasses.dataclass(frozen=True, order=True)
class PolicySnapshotId:
    """
    Identifier of the policy parameters after a given optimizer step
    """

    step_index: int = 0

    def __post_init__(self) -> None:
        if self.step_index < 0:
            msg = f"Snapshot step index must be non-negative, got {self.step_index}"
            raise ValueError(msg)

    def next(self) -> PolicySnapshotId:
        """
        The snapshot produced by one more optimizer step
        """
        return PolicySnapshotId(self.step_index + 1)


@dataclasses.dataclass(frozen=True)
class Prompt:
    """
    A training or inference query

    Refinement prompts keep the id of the prompt they were derived
    from on ``parent_id`` and inherit its reference answer.
    """

    id: str
    text: str
    kind: PromptKind = PromptKind.NONVERIFIABLE
    reference_answer: str | None = None
    tokens: tuple[int, ...] = ()
    parent_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind is PromptKind.VERIFIABLE and self.reference_answer is None:
            msg = f"Verifiable prompt {self.id!r} has no reference answer"
            raise InvalidPromptError(msg)

    @property
    def is_verifiable(self) -> bool:
        """
        Whether an automatic answer check is available
        """
        return self.reference_answer is not None


def build_prompt_pool(prompts: Iterable[Prompt]) -> dict[str, Prompt]:
    """
    Index prompts by id, rejecting duplicates
    """
    pool: dict[str, Prompt] = {}
    for prompt in prompts:
        if prompt.id in pool:
            msg = f"Duplicate prompt id in pool: {prompt.id!r}"
            raise DuplicatePromptError(msg)
        pool[prompt.id] = prompt
    return pool


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """
    One sampled response with its per-token sampling log-probabilities

    A trajectory resumed from a partial rollout keeps the first
    ``prefix_length`` log-probabilities from ``prefix_source_policy``.
    """

    prompt_id: str
    tokens: tuple[int, ...]
    sampling_logprobs: tuple[float, ...]
    source_policy: int = 0
    reward: float | None = None
    truncated: bool = False
    text: str = ""
    prefix_length: int = 0
    prefix_source_policy: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def is_scored(self) -> bool:
        """
        Whether a reward has been assigned
        """
        return self.reward is not None

    def with_reward(self, reward: float) -> Trajectory:
        """
        Copy of the trajectory carrying ``reward``
        """
        return dataclasses.replace(self, reward=float(reward))

    def to_record(self) -> dict[str, Any]:
        """
        Canonical JSONL record
        """
        record: dict[str, Any] = {
            "prompt_id": self.prompt_id,
            "tokens": list(self.tokens),
            "sampling_logprobs": list(self.sampling_logprobs),
            "source_policy": self.source_policy,
            "reward": self.reward,
            "truncated": self.truncated,
        }
        if self.text:
            record["text"] = self.text
        if self.prefix_length:
            record["prefix_length"] = self.prefix_length
            record["prefix_source_policy"] = self.prefix_source_policy
        return record

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> Trajectory:
        """
        Build a trajectory from its JSONL record
        """
        reward = record.get("reward")
        return cls(
            prompt_id=str(record["prompt_id"]),
            tokens=tuple(int(token) for token in record["tokens"]),
            sampling_logprobs=tuple(float(lp) for lp in record["sampling_logprobs"]),
            source_policy=int(record.get("source_policy", 0)),
            reward=None if reward is None else float(reward),
            truncated=bool(record.get("truncated", False)),
            text=str(record.get("text", "")),
            prefix_length=int(record.get("prefix_length", 0)),
            prefix_source_policy=record.get("prefix_source_policy"),
        )


@dataclasses.dataclass(frozen=True)
class RolloutGroup:
    """
    The K trajectories sampled for one prompt and their reward statistics
    """

    prompt_id: str
    members: tuple[Trajectory, ...]
    mean_reward: float
    success_count: int

    def __len__(self) -> int:
        return len(self.members)

    @property
    def rewards(self) -> list[float]:
        """
        Member rewards in member order
        """
        return [float(member.reward) for member in self.members]  # type: ignore[arg-type]


def group_stats(members: Sequence[Trajectory]) -> RolloutGroup:
    """
    Group trajectories of one prompt and compute μ_G and n_+

    Parameters
    ----------
    members : Sequence[Trajectory]
        Scored trajectories sharing a prompt id, kept in the given order

    Returns
    -------
    RolloutGroup
    """
    if not members:
        msg = "Cannot build a rollout group without members"
        raise EmptyInputError(msg)
    prompt_ids = {member.prompt_id for member in members}
    if len(prompt_ids) != 1:
        msg = f"Rollout group mixes prompts: {', '.join(sorted(prompt_ids))}"
        raise MixedPromptError(msg)
    if any(member.reward is None for member in members):
        msg = f"Rollout group for {members[0].prompt_id!r} has unscored members"
        raise UnscoredError(msg)
    rewards = [float(member.reward) for member in members]  # type: ignore[arg-type]
    return RolloutGroup(
        prompt_id=members[0].prompt_id,
        members=tuple(members),
        mean_reward=math.fsum(rewards) / len(rewards),
        success_count=sum(1 for reward in rewards if reward == 1.0),
    )


def validate_trajectory(trajectory: Trajectory) -> list[str]:
    """
    Every invariant violation of a trajectory, empty when valid
    """
    violations: list[str] = []
    if len(trajectory.tokens) != len(trajectory.sampling_logprobs):
        violations.append("length mismatch")
    if any(logprob > 0 for logprob in trajectory.sampling_logprobs):
        violations.append("positive logprob")
    if any(math.isnan(logprob) for logprob in trajectory.sampling_logprobs):
        violations.append("nan logprob")
    if any(token < 0 for token in trajectory.tokens):
        violations.append("negative token id")
    if trajectory.reward is not None and trajectory.reward not in (0.0, 1.0):
        violations.append("reward outside {0,1}")
    if not 0 <= trajectory.prefix_length <= len(trajectory.tokens):
        violations.append("prefix longer than trajectory")
    return violations


def named_rng(seed: int, name: str) -> np.random.Generator:
    """
    Independent random stream derived from a master seed and a stream name
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
