"""
Clipped sequence-level policy objective

Advantages are group-relative (``r - mean``) with no standard-deviation
normalization. Every response gets one length-normalized importance
ratio, clipped symmetrically around one.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Protocol, Sequence

import numpy as np

from proofpipe.core import RolloutGroup, Trajectory, group_stats
from proofpipe.exceptions import (
    AlignmentError,
    ConfigValidationError,
    EmptyInputError,
    EmptySequenceError,
    LengthMismatchError,
    MissingSourceLogprobError,
    UnscoredError,
)

ADVANTAGE_SUM_TOLERANCE = 1e-12


class DifferentiablePolicy(Protocol):
    """
    A policy that scores responses and differentiates weighted log-likelihoods
    """

    params: np.ndarray

    def batch_logprobs(self, sequences: Sequence[Sequence[int]]) -> list[np.ndarray]:
        """
        Per-token log-probabilities of every sequence
        """

    def weighted_grad(
        self, sequences: Sequence[Sequence[int]], weights: Sequence[float]
    ) -> np.ndarray:
        """
        Gradient of the weighted sum of sequence log-likelihoods
        """


@dataclasses.dataclass(frozen=True)
class ClipConfig:
    """
    Symmetric clip range ``[1 - epsilon, 1 + epsilon]``
    """

    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ConfigValidationError("epsilon", "must be in (0, 1)")

    @property
    def lower(self) -> float:
        """
        Lower clip bound
        """
        return 1.0 - self.epsilon

    @property
    def upper(self) -> float:
        """
        Upper clip bound
        """
        return 1.0 + self.epsilon


@dataclasses.dataclass(frozen=True)
class MixConfig:
    """
    Weight of the replay term in the mixed objective
    """

    replay_ratio: float = 0.25

    def __post_init__(self) -> None:
        if not 0 <= self.replay_ratio <= 1:
            raise ConfigValidationError("replay_ratio", "must be in [0, 1]")


@dataclasses.dataclass(frozen=True)
class AdvantageSet:
    """
    Per-member group-relative advantages
    """

    values: tuple[float, ...]

    @property
    def is_centered(self) -> bool:
        """
        Whether the advantages sum to zero within tolerance
        """
        return abs(math.fsum(self.values)) < ADVANTAGE_SUM_TOLERANCE

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> float:
        return self.values[index]


@dataclasses.dataclass(frozen=True)
class GroupTerms:
    """
    A rollout group with its members' ratios and advantages
    """

    group: RolloutGroup
    ratios: tuple[float, ...]
    advantages: AdvantageSet


def advantages(group: RolloutGroup) -> AdvantageSet:
    """
    ``A_i = r_i - mean(r)`` over every member of the group
    """
    if any(member.reward is None for member in group.members):
        msg = f"Group for {group.prompt_id!r} has unscored members"
        raise UnscoredError(msg)
    return AdvantageSet(tuple(reward - group.mean_reward for reward in group.rewards))


def sequence_ratio(new_logprobs: Sequence[float], old_logprobs: Sequence[float]) -> float:
    """
    ``exp(mean_t(new_t - old_t))`` with the differences summed exactly
    """
    if len(new_logprobs) != len(old_logprobs):
        msg = f"Ratio over {len(new_logprobs)} new and {len(old_logprobs)} old log-probabilities"
        raise LengthMismatchError(msg)
    if len(new_logprobs) == 0:
        msg = "Cannot compute a sequence ratio over an empty response"
        raise EmptySequenceError(msg)
    differences = (float(new) - float(old) for new, old in zip(new_logprobs, old_logprobs))
    return math.exp(math.fsum(differences) / len(new_logprobs))


def clipped_term(ratio: float, advantage: float, clip: ClipConfig) -> float:
    """
    ``min(s A, clip(s, 1 - eps, 1 + eps) A)``
    """
    clipped = min(max(ratio, clip.lower), clip.upper)
    return min(ratio * advantage, clipped * advantage)


def gradient_flows(ratio: float, advantage: float, clip: ClipConfig) -> bool:
    """
    Whether the unclipped branch is the active one for a member
    """
    if advantage > 0:
        return ratio <= clip.upper
    if advantage < 0:
        return ratio >= clip.lower
    return False


def _check_aligned(terms: GroupTerms) -> None:
    size = len(terms.group.members)
    if len(terms.ratios) != size or len(terms.advantages) != size:
        msg = (
            f"Group {terms.group.prompt_id!r} has {size} members, "
            f"{len(terms.ratios)} ratios and {len(terms.advantages)} advantages"
        )
        raise AlignmentError(msg)


def gspo_surrogate(groups: Sequence[GroupTerms], clip: ClipConfig) -> float:
    """
    Mean over groups of the per-group mean clipped term
    """
    if not groups:
        msg = "Cannot evaluate the surrogate over zero groups"
        raise EmptyInputError(msg)
    group_values = []
    for terms in groups:
        _check_aligned(terms)
        member_terms = [
            clipped_term(ratio, advantage, clip)
            for ratio, advantage in zip(terms.ratios, terms.advantages.values)
        ]
        group_values.append(math.fsum(member_terms) / len(member_terms))
    return math.fsum(group_values) / len(group_values)


def _require_source_logprobs(member: Trajectory) -> None:
    if len(member.sampling_logprobs) != len(member.tokens) or (
        member.tokens and not member.sampling_logprobs
    ):
        msg = (
            f"Replayed trajectory for {member.prompt_id!r} lacks source-policy "
            f"log-probabilities ({len(member.sampling_logprobs)} for {len(member.tokens)} tokens)"
        )
        raise MissingSourceLogprobError(msg)


def evaluate_groups(
    policy: DifferentiablePolicy,
    groups: Sequence[RolloutGroup],
    require_source_logprobs: bool = False,
) -> list[GroupTerms]:
    """
    Score every member under ``policy`` against its frozen sampling log-probabilities
    """
    members = [member for group in groups for member in group.members]
    if require_source_logprobs:
        for member in members:
            _require_source_logprobs(member)
    new_logprobs = policy.batch_logprobs([member.tokens for member in members])
    evaluated = []
    offset = 0
    for group in groups:
        ratios = tuple(
            sequence_ratio(new_logprobs[offset + position], member.sampling_logprobs)
            for position, member in enumerate(group.members)
        )
        offset += len(group.members)
        evaluated.append(GroupTerms(group=group, ratios=ratios, advantages=advantages(group)))
    return evaluated


def gspo_objective(
    policy: DifferentiablePolicy, groups: Sequence[RolloutGroup], clip: ClipConfig
) -> float:
    """
    Surrogate value of ``groups`` under ``policy``
    """
    return gspo_surrogate(evaluate_groups(policy, groups), clip)


def gspo_gradient(
    policy: DifferentiablePolicy, groups: Sequence[RolloutGroup], clip: ClipConfig
) -> np.ndarray:
    """
    Exact gradient of the surrogate with respect to ``policy.params``

    Sampling log-probabilities and advantages are constants. A member on
    its clipped branch contributes nothing; elsewhere ``d s / d theta`` is
    ``s / |o|`` times the summed token score.
    """
    if not groups:
        msg = "Cannot differentiate the surrogate over zero groups"
        raise EmptyInputError(msg)
    evaluated = evaluate_groups(policy, groups)
    sequences: list[tuple[int, ...]] = []
    weights: list[float] = []
    for terms in evaluated:
        group_size = len(terms.group.members)
        for member, ratio, advantage in zip(
            terms.group.members, terms.ratios, terms.advantages.values
        ):
            if not gradient_flows(ratio, advantage, clip):
                continue
            sequences.append(member.tokens)
            weights.append(advantage * ratio / (len(member.tokens) * group_size * len(groups)))
    if not sequences:
        return np.zeros_like(policy.params)
    return policy.weighted_grad(sequences, weights)


def augment_group(group: RolloutGroup, replayed: Trajectory) -> RolloutGroup:
    """
    The ``K + 1`` member group ``{o*} + G`` used by the replay term
    """
    _require_source_logprobs(replayed)
    return group_stats([replayed, *group.members])


def refined_objective(
    fresh: Sequence[GroupTerms],
    replay: Sequence[GroupTerms],
    mix: MixConfig,
    clip: ClipConfig,
) -> float:
    """
    ``(1 - rho) * surrogate(fresh) + rho * surrogate(replay)``

    A side with no groups leaves the other side's surrogate as the objective.
    """
    if not fresh and not replay:
        msg = "Cannot evaluate the refined objective without any groups"
        raise EmptyInputError(msg)
    if not replay:
        return gspo_surrogate(fresh, clip)
    if not fresh:
        return gspo_surrogate(replay, clip)
    rho = mix.replay_ratio
    return (1.0 - rho) * gspo_surrogate(fresh, clip) + rho * gspo_surrogate(replay, clip)


def refined_policy_objective(
    policy: DifferentiablePolicy,
    fresh: Sequence[RolloutGroup],
    replay: Sequence[RolloutGroup],
    mix: MixConfig,
    clip: ClipConfig,
) -> float:
    """
    Refined objective of raw groups under ``policy``
    """
    return refined_objective(
        evaluate_groups(policy, fresh),
        evaluate_groups(policy, replay, require_source_logprobs=True),
        mix,
        clip,
    )


def refined_gradient(
    policy: DifferentiablePolicy,
    fresh: Sequence[RolloutGroup],
    replay: Sequence[RolloutGroup],
    mix: MixConfig,
    clip: ClipConfig,
) -> np.ndarray:
    """
    Gradient of :func:`refined_policy_objective`
    """
    if not fresh and not replay:
        msg = "Cannot differentiate the refined objective without any groups"
        raise EmptyInputError(msg)
    for group in replay:
        for member in group.members:
            _require_source_logprobs(member)
    if not replay:
        return gspo_gradient(policy, fresh, clip)
    if not fresh:
        return gspo_gradient(policy, replay, clip)
    rho = mix.replay_ratio
    return (1.0 - rho) * gspo_gradient(policy, fresh, clip) + rho * gspo_gradient(
        policy, replay, clip
    )
