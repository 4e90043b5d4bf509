"""
Rollout planning: oversampling, dynamic filtering and partial rollouts
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Deque, Mapping, Sequence

import numpy as np

from proofpipe.core import PolicySnapshotId, Prompt, RolloutGroup, Trajectory
from proofpipe.exceptions import ConfigValidationError, LengthMismatchError
from proofpipe.simpolicy import Prefix, ToyPolicy, is_finished, sample_batch

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    """
    Rollout batch sizes and generation limits
    """

    prompt_batch: int = 128
    oversample_batch: int = 160
    samples_per_prompt: int = 8
    max_response_tokens: int = 160000
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.prompt_batch < 1:
            raise ConfigValidationError("prompt_batch", "must be at least 1")
        if self.oversample_batch < self.prompt_batch:
            raise ConfigValidationError("oversample_batch", "must be at least prompt_batch")
        if self.samples_per_prompt < 2:
            raise ConfigValidationError("samples_per_prompt", "must be at least 2")
        if self.max_response_tokens < 1:
            raise ConfigValidationError("max_response_tokens", "must be positive")
        if not self.temperature > 0:
            raise ConfigValidationError("temperature", "must be positive")


@dataclasses.dataclass(frozen=True)
class PartialRollout:
    """
    A generation cut at a round boundary, resumed in a later round
    """

    prompt_id: str
    prefix_tokens: tuple[int, ...]
    prefix_logprobs: tuple[float, ...]
    source_policy: PolicySnapshotId

    def __post_init__(self) -> None:
        if len(self.prefix_tokens) != len(self.prefix_logprobs):
            msg = (
                f"Partial rollout for {self.prompt_id!r} has {len(self.prefix_tokens)} "
                f"tokens and {len(self.prefix_logprobs)} log-probabilities"
            )
            raise LengthMismatchError(msg)

    def __len__(self) -> int:
        return len(self.prefix_tokens)

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory) -> PartialRollout:
        """
        Store an unfinished generation
        """
        return cls(
            prompt_id=trajectory.prompt_id,
            prefix_tokens=trajectory.tokens,
            prefix_logprobs=trajectory.sampling_logprobs,
            source_policy=PolicySnapshotId(
                trajectory.prefix_source_policy
                if trajectory.prefix_length
                else trajectory.source_policy
            ),
        )

    def to_prefix(self) -> Prefix:
        """
        The stored prefix as a sampling seed
        """
        return Prefix(
            tokens=self.prefix_tokens,
            logprobs=self.prefix_logprobs,
            source_policy=self.source_policy.step_index,
        )


@dataclasses.dataclass
class OversampleDraw:
    """
    Prompts drawn for one rollout round
    """

    prompts: list[Prompt]
    shortfall: bool


@dataclasses.dataclass
class OversampleOutcome:
    """
    How every drawn prompt left the round

    Each drawn prompt is exactly one of trained, requeued or dropped.
    """

    trained: list[tuple[Prompt, RolloutGroup]]
    requeued: list[Prompt]
    dropped: list[Prompt]
    shortfall: bool

    @property
    def drawn(self) -> int:
        """
        Number of prompts accounted for
        """
        return len(self.trained) + len(self.requeued) + len(self.dropped)


@dataclasses.dataclass
class RoundSeeds:
    """
    Partial rollouts to resume next round and generations that finished
    """

    partials: list[PartialRollout]
    completed: list[Trajectory]

    def by_prompt(self) -> dict[str, list[PartialRollout]]:
        """
        Partial rollouts grouped by prompt id, in order
        """
        grouped: dict[str, list[PartialRollout]] = {}
        for partial in self.partials:
            grouped.setdefault(partial.prompt_id, []).append(partial)
        return grouped


def has_reward_variance(group: RolloutGroup) -> bool:
    """
    Whether the member rewards are not all equal
    """
    rewards = group.rewards
    return any(reward != rewards[0] for reward in rewards)


def dynamic_filter(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """
    Keep the groups whose rewards are not all equal, preserving order
    """
    return [group for group in groups if has_reward_variance(group)]


def plan_oversample(queue: Deque[Prompt], cfg: SamplerConfig) -> OversampleDraw:
    """
    FIFO draw of ``oversample_batch`` prompts, fewer with a shortfall flag
    """
    count = min(cfg.oversample_batch, len(queue))
    prompts = [queue.popleft() for _ in range(count)]
    return OversampleDraw(prompts=prompts, shortfall=count < cfg.oversample_batch)


def settle_oversample(
    drawn: Sequence[tuple[Prompt, RolloutGroup]],
    queue: Deque[Prompt],
    cfg: SamplerConfig,
    target: int | None = None,
) -> OversampleOutcome:
    """
    Split a scored draw into trained, requeued and dropped prompts

    The first ``target`` groups with reward variance are trained,
    ``prompt_batch`` when no target is given. Surplus survivors return to
    the front of ``queue`` in draw order.
    """
    batch = cfg.prompt_batch if target is None else target
    if batch < 0:
        msg = f"target must be non-negative, got {batch}"
        raise ValueError(msg)
    trained: list[tuple[Prompt, RolloutGroup]] = []
    requeued: list[Prompt] = []
    dropped: list[Prompt] = []
    for prompt, group in drawn:
        if not has_reward_variance(group):
            dropped.append(prompt)
        elif len(trained) < batch:
            trained.append((prompt, group))
        else:
            requeued.append(prompt)
    queue.extendleft(reversed(requeued))
    shortfall = len(trained) < batch
    if shortfall:
        logger.debug(
            "[proofpipe] Oversample shortfall: %d of %d groups survived filtering",
            len(trained),
            batch,
        )
    return OversampleOutcome(
        trained=trained, requeued=requeued, dropped=dropped, shortfall=shortfall
    )


def recycle_partials(
    in_flight: Sequence[PartialRollout], completed: Sequence[Trajectory]
) -> RoundSeeds:
    """
    Carry unfinished generations into the next round

    Completed trajectories pass through unchanged.
    """
    return RoundSeeds(partials=list(in_flight), completed=list(completed))


def split_generations(
    policy: ToyPolicy, generations: Sequence[Trajectory], max_len: int
) -> RoundSeeds:
    """
    Separate finished generations from ones cut at the round boundary
    """
    in_flight = []
    completed = []
    for trajectory in generations:
        if is_finished(policy, trajectory, max_len):
            completed.append(trajectory)
        else:
            in_flight.append(PartialRollout.from_trajectory(trajectory))
    return recycle_partials(in_flight, completed)


def resume(
    policy: ToyPolicy,
    seed: PartialRollout,
    max_len: int,
    temperature: float,
    rng: np.random.Generator,
    max_new_tokens: int | None = None,
) -> Trajectory:
    """
    Continue a stored prefix under the current policy
    """
    return sample_batch(
        policy=policy,
        prompt_ids=[seed.prompt_id],
        max_len=max_len,
        temperature=temperature,
        rng=rng,
        prefixes=[seed.to_prefix()],
        max_new_tokens=max_new_tokens,
    )[0]


def rollout(
    policy: ToyPolicy,
    prompts: Sequence[Prompt],
    cfg: SamplerConfig,
    max_len: int,
    rng: np.random.Generator,
    seeds: Mapping[str, Sequence[PartialRollout]] | None = None,
    max_new_tokens: int | None = None,
) -> list[list[Trajectory]]:
    """
    ``samples_per_prompt`` generations for every prompt in one batch

    Stored partial rollouts of a prompt are resumed first and count
    toward its samples.
    """
    seeds = seeds or {}
    prompt_ids: list[str] = []
    prefixes: list[Prefix | None] = []
    for prompt in prompts:
        resumed = list(seeds.get(prompt.id, ()))[: cfg.samples_per_prompt]
        prefixes.extend(seed.to_prefix() for seed in resumed)
        prefixes.extend([None] * (cfg.samples_per_prompt - len(resumed)))
        prompt_ids.extend([prompt.id] * cfg.samples_per_prompt)
    generations = sample_batch(
        policy=policy,
        prompt_ids=prompt_ids,
        max_len=min(max_len, cfg.max_response_tokens),
        temperature=cfg.temperature,
        rng=rng,
        prefixes=prefixes,
        max_new_tokens=max_new_tokens,
    )
    size = cfg.samples_per_prompt
    return [generations[start : start + size] for start in range(0, len(generations), size)]
