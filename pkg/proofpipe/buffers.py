"""
Experience replay and self-refinement buffers
"""

from __future__ import annotations

import collections
import dataclasses
import enum
import logging
import math
import pathlib
import threading
from typing import Any, Deque, Protocol, Sequence

import numpy as np

from proofpipe.core import PolicySnapshotId, Prompt, PromptKind, RolloutGroup, Trajectory
from proofpipe.exceptions import (
    ConfigValidationError,
    EmptyFreshQueueError,
    NotInBufferError,
    PolicyEvalError,
)
from proofpipe.records import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

RESIDUAL_FLOOR = 1e-12

REFINEMENT_TEMPLATE = """\
The following problem was attempted, and the previous solution was judged incorrect.

### Problem

{problem}

### Previous Solution

{solution}

Critique the previous solution, fix its proof errors, fill in any missing \
justifications, and write a complete final solution. Put the final answer \
in \\boxed{{}}."""


class TopKPolicy(Protocol):
    """
    A policy exposing per-position top-k next-token probabilities
    """

    snapshot: PolicySnapshotId

    def topk_probs(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int], k: int
    ) -> np.ndarray:
        """
        Shape ``(len(target_tokens), <= k)`` probabilities
        """


class AdmissionRule(str, enum.Enum):
    """
    How replay admission and retirement read a group's successes
    """

    COUNT = "count"
    RATE = "rate"


@dataclasses.dataclass(frozen=True)
class BufferConfig:
    """
    Replay and refinement buffer settings
    """

    tau_ref: float = 0.5
    eta_ref: float = 0.2
    replay_ratio: float = 0.25
    admit_success_max: int = 2
    retire_success_min: int = 4
    topk_for_entropy: int = 16
    admission_rule: str = AdmissionRule.COUNT.value
    admit_rate_max: float = 0.25
    retire_rate_min: float = 0.5

    def __post_init__(self) -> None:
        if not 0 < self.tau_ref <= 1:
            raise ConfigValidationError("tau_ref", "must be in (0, 1]")
        if not 0 <= self.eta_ref < 1:
            raise ConfigValidationError("eta_ref", "must be in [0, 1)")
        if not 0 <= self.replay_ratio < 1:
            raise ConfigValidationError("replay_ratio", "must be in [0, 1)")
        if not 0 < self.admit_success_max <= self.retire_success_min:
            raise ConfigValidationError(
                "admit_success_max", "must satisfy 0 < admit_success_max <= retire_success_min"
            )
        if self.topk_for_entropy < 1:
            raise ConfigValidationError("topk_for_entropy", "must be at least 1")
        if self.admission_rule not in {rule.value for rule in AdmissionRule}:
            raise ConfigValidationError("admission_rule", "must be 'count' or 'rate'")
        if not 0 < self.admit_rate_max <= self.retire_rate_min <= 1:
            raise ConfigValidationError(
                "admit_rate_max", "must satisfy 0 < admit_rate_max <= retire_rate_min <= 1"
            )

    def admits(self, success_count: int, group_size: int) -> bool:
        """
        Whether a group is hard but solvable
        """
        if success_count <= 0:
            return False
        if self.admission_rule == AdmissionRule.RATE.value:
            return success_count / group_size < self.admit_rate_max
        return success_count < self.admit_success_max

    def retires(self, success_count: int, group_size: int) -> bool:
        """
        Whether fresh rollouts solve a replayed prompt often enough
        """
        if self.admission_rule == AdmissionRule.RATE.value:
            return group_size > 0 and success_count / group_size >= self.retire_rate_min
        return success_count >= self.retire_success_min


def entropy_estimate(trajectory: Trajectory, policy: TopKPolicy, cfg: BufferConfig) -> float:
    """
    Mean top-k entropy along a trajectory, in nats

    The probability mass outside the top-k is lumped into one residual
    outcome. An empty trajectory has entropy 0.
    """
    if not trajectory.tokens:
        return 0.0
    try:
        top = np.asarray(
            policy.topk_probs((), trajectory.tokens, cfg.topk_for_entropy), dtype=np.float64
        )
    except PolicyEvalError:
        raise
    except (IndexError, ValueError) as e:
        msg = f"Could not evaluate top-{cfg.topk_for_entropy} probabilities: {e}"
        raise PolicyEvalError(msg) from e
    if top.ndim != 2 or top.shape[0] != len(trajectory.tokens):
        msg = f"Top-k table has shape {top.shape} for {len(trajectory.tokens)} positions"
        raise PolicyEvalError(msg)
    residual = 1.0 - top.sum(axis=1)
    residual = np.where(residual < RESIDUAL_FLOOR, 0.0, residual)
    outcomes = np.concatenate([top, residual[:, None]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(outcomes > 0, -outcomes * np.log(outcomes), 0.0)
    per_position = terms.sum(axis=1)
    return max(math.fsum(per_position.tolist()) / len(per_position), 0.0)


@dataclasses.dataclass
class ReplayEntry:
    """
    Stored successful trajectories for one hard query
    """

    prompt_id: str
    trajectories: list[Trajectory] = dataclasses.field(default_factory=list)
    entropy_estimates: list[float] = dataclasses.field(default_factory=list)
    admitted_at: PolicySnapshotId = dataclasses.field(default_factory=PolicySnapshotId)

    def __contains__(self, tokens: object) -> bool:
        return any(trajectory.tokens == tokens for trajectory in self.trajectories)

    def to_record(self) -> dict[str, Any]:
        """
        Checkpoint record
        """
        return {
            "type": "replay",
            "prompt_id": self.prompt_id,
            "trajectories": [trajectory.to_record() for trajectory in self.trajectories],
            "entropy_estimates": list(self.entropy_estimates),
            "admitted_at": self.admitted_at.step_index,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> ReplayEntry:
        """
        Restore an entry from its checkpoint record
        """
        return cls(
            prompt_id=str(record["prompt_id"]),
            trajectories=[Trajectory.from_record(item) for item in record["trajectories"]],
            entropy_estimates=[float(value) for value in record["entropy_estimates"]],
            admitted_at=PolicySnapshotId(int(record["admitted_at"])),
        )


class ReplayBuffer:
    """
    Query-keyed store of rare successes, in admission order

    Retirement is permanent: a retired prompt is never admitted again.
    """

    def __init__(self) -> None:
        self.entries: collections.OrderedDict[str, ReplayEntry] = collections.OrderedDict()
        self.retired: set[str] = set()
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, prompt_id: object) -> bool:
        return prompt_id in self.entries

    def prompt_ids(self) -> list[str]:
        """
        Stored prompt ids in admission order
        """
        with self.lock:
            return list(self.entries)

    @property
    def trajectory_count(self) -> int:
        """
        Number of stored trajectories across all entries
        """
        return sum(len(entry.trajectories) for entry in self.entries.values())

    def admit(self, group: RolloutGroup, policy: TopKPolicy, cfg: BufferConfig) -> bool:
        """
        Store the group's successes when the group is hard but solvable
        """
        if not cfg.admits(group.success_count, len(group.members)):
            return False
        with self.lock:
            if group.prompt_id in self.retired:
                return False
            entry = self.entries.get(group.prompt_id)
            if entry is None:
                entry = ReplayEntry(prompt_id=group.prompt_id, admitted_at=policy.snapshot)
                self.entries[group.prompt_id] = entry
            for member in group.members:
                if member.reward != 1.0 or member.tokens in entry:
                    continue
                entry.trajectories.append(member)
                entry.entropy_estimates.append(entropy_estimate(member, policy, cfg))
        logger.debug(
            "[proofpipe] Admitted %s to replay (%d stored)",
            group.prompt_id,
            len(entry.trajectories),
        )
        return True

    def retire(
        self,
        prompt_id: str,
        fresh_success_count: int,
        cfg: BufferConfig,
        group_size: int = 0,
    ) -> bool:
        """
        Drop a prompt once fresh on-policy rollouts solve it often enough
        """
        with self.lock:
            if prompt_id not in self.entries:
                return False
            if not cfg.retires(fresh_success_count, group_size):
                return False
            del self.entries[prompt_id]
            self.retired.add(prompt_id)
        logger.debug("[proofpipe] Retired %s from replay", prompt_id)
        return True

    def select(self, prompt_id: str, policy: TopKPolicy, cfg: BufferConfig) -> Trajectory:
        """
        The stored trajectory with the lowest entropy under ``policy``

        Ties go to the earliest stored trajectory.
        """
        with self.lock:
            entry = self.entries.get(prompt_id)
            if entry is None or not entry.trajectories:
                msg = f"Prompt {prompt_id!r} is not in the replay buffer"
                raise NotInBufferError(msg)
            estimates = [entropy_estimate(member, policy, cfg) for member in entry.trajectories]
            entry.entropy_estimates = estimates
            best = min(range(len(estimates)), key=lambda position: (estimates[position], position))
            return entry.trajectories[best]

    def to_records(self) -> list[dict[str, Any]]:
        """
        Checkpoint records for every entry and retired prompt
        """
        with self.lock:
            records = [entry.to_record() for entry in self.entries.values()]
            records.extend(
                {"type": "retired", "prompt_id": prompt_id} for prompt_id in sorted(self.retired)
            )
        return records


@dataclasses.dataclass(frozen=True)
class RefinementPrompt:
    """
    A failed response turned into a critique-and-repair query
    """

    original_prompt_id: str
    original_text: str
    failed_response: str
    created_at: PolicySnapshotId
    prompt_id: str
    reference_answer: str | None = None

    def render(self) -> str:
        """
        Refinement query text
        """
        return REFINEMENT_TEMPLATE.format(
            problem=self.original_text, solution=self.failed_response
        )

    def to_prompt(self) -> Prompt:
        """
        The refinement query as a trainable prompt
        """
        return Prompt(
            id=self.prompt_id,
            text=self.render(),
            kind=PromptKind.REFINEMENT,
            reference_answer=self.reference_answer,
            parent_id=self.original_prompt_id,
        )

    def to_record(self) -> dict[str, Any]:
        """
        Checkpoint record
        """
        return {
            "type": "refinement",
            "original_prompt_id": self.original_prompt_id,
            "original_text": self.original_text,
            "failed_response": self.failed_response,
            "created_at": self.created_at.step_index,
            "prompt_id": self.prompt_id,
            "reference_answer": self.reference_answer,
        }

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> RefinementPrompt:
        """
        Restore a refinement prompt from its checkpoint record
        """
        return cls(
            original_prompt_id=str(record["original_prompt_id"]),
            original_text=str(record["original_text"]),
            failed_response=str(record["failed_response"]),
            created_at=PolicySnapshotId(int(record["created_at"])),
            prompt_id=str(record["prompt_id"]),
            reference_answer=record.get("reference_answer"),
        )


class RefinementBuffer:
    """
    FIFO of pending refinement prompts
    """

    def __init__(self) -> None:
        self.pending: Deque[RefinementPrompt] = collections.deque()
        self.created = 0
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.pending)

    def push(
        self,
        original_prompt: Prompt,
        failed_response: str,
        created_at: PolicySnapshotId,
    ) -> RefinementPrompt:
        """
        Enqueue one failed response of ``original_prompt``
        """
        with self.lock:
            item = RefinementPrompt(
                original_prompt_id=original_prompt.id,
                original_text=original_prompt.text,
                failed_response=failed_response,
                created_at=created_at,
                prompt_id=f"{original_prompt.id}#refine-{self.created}",
                reference_answer=original_prompt.reference_answer,
            )
            self.created += 1
            self.pending.append(item)
        return item

    def take(self, count: int) -> list[RefinementPrompt]:
        """
        Remove up to ``count`` prompts from the front
        """
        with self.lock:
            return [self.pending.popleft() for _ in range(min(count, len(self.pending)))]

    def to_records(self) -> list[dict[str, Any]]:
        """
        Checkpoint records, in queue order
        """
        with self.lock:
            return [item.to_record() for item in self.pending]


def refinement_enqueue(
    buffer: RefinementBuffer,
    group: RolloutGroup,
    original_prompt: Prompt,
    cfg: BufferConfig,
    created_at: PolicySnapshotId | None = None,
) -> int:
    """
    Turn every failed member of a low-reward group into a refinement prompt

    Groups from refinement prompts are never enqueued again.

    Returns
    -------
    int
        The number of prompts enqueued
    """
    if original_prompt.kind is PromptKind.REFINEMENT:
        return 0
    if not group.mean_reward < cfg.tau_ref:
        return 0
    snapshot = created_at if created_at is not None else PolicySnapshotId()
    enqueued = 0
    for member in group.members:
        if member.reward == 0.0:
            buffer.push(original_prompt, member.text, snapshot)
            enqueued += 1
    if enqueued:
        logger.debug(
            "[proofpipe] Enqueued %d refinement prompts for %s (mean reward %.3f)",
            enqueued,
            group.prompt_id,
            group.mean_reward,
        )
    return enqueued


@dataclasses.dataclass
class BatchPlan:
    """
    Composition of one training batch
    """

    fresh: list[Prompt]
    refinement: list[RefinementPrompt]
    replay: list[str]
    displaced: list[Prompt]

    @property
    def size(self) -> int:
        """
        Number of queries in the batch
        """
        return len(self.fresh) + len(self.refinement) + len(self.replay)


def batch_slots(
    refinement_buffer: RefinementBuffer,
    replay_buffer: ReplayBuffer,
    batch_size: int,
    cfg: BufferConfig,
) -> tuple[int, int, int]:
    """
    Refinement, replay and fresh slot counts for one batch

    ``floor(eta * B)`` slots go to refinement prompts and
    ``floor(rho * (B - n_ref))`` to replay queries, each fewer when its
    buffer is short. Fresh prompts fill the rest.
    """
    with refinement_buffer.lock, replay_buffer.lock:
        n_ref = min(math.floor(cfg.eta_ref * batch_size), len(refinement_buffer))
        n_rep = min(math.floor(cfg.replay_ratio * (batch_size - n_ref)), len(replay_buffer))
    return n_ref, n_rep, batch_size - n_ref - n_rep


def assemble_batch(
    fresh_queue: Deque[Prompt],
    refinement_buffer: RefinementBuffer,
    replay_buffer: ReplayBuffer,
    batch_size: int,
    cfg: BufferConfig,
    holding: Deque[Prompt] | None = None,
) -> BatchPlan:
    """
    Fill ``batch_size`` slots with refinement, replay and fresh queries

    Slot counts follow :func:`batch_slots`. Fresh prompts come from
    ``holding`` first. Fresh prompts displaced by refinement slots move
    from ``fresh_queue`` to ``holding``.
    """
    if batch_size < 1:
        msg = f"batch_size must be positive, got {batch_size}"
        raise ValueError(msg)
    holding = holding if holding is not None else collections.deque()
    if not fresh_queue and not holding:
        msg = "Cannot assemble a batch from an empty fresh queue"
        raise EmptyFreshQueueError(msg)
    with refinement_buffer.lock, replay_buffer.lock:
        n_ref, n_rep, n_fresh = batch_slots(refinement_buffer, replay_buffer, batch_size, cfg)
        refinement = refinement_buffer.take(n_ref)
        replay = replay_buffer.prompt_ids()[:n_rep]
    fresh: list[Prompt] = []
    while len(fresh) < n_fresh and holding:
        fresh.append(holding.popleft())
    while len(fresh) < n_fresh and fresh_queue:
        fresh.append(fresh_queue.popleft())
    displaced = [fresh_queue.popleft() for _ in range(min(n_ref, len(fresh_queue)))]
    holding.extend(displaced)
    return BatchPlan(fresh=fresh, refinement=refinement, replay=replay, displaced=displaced)


def save_buffers(
    path: pathlib.Path, replay: ReplayBuffer, refinement: RefinementBuffer
) -> int:
    """
    Write both buffers to one JSONL checkpoint
    """
    records = replay.to_records() + refinement.to_records()
    records.append({"type": "refinement_counter", "created": refinement.created})
    return write_jsonl(path, records)


def load_buffers(path: pathlib.Path) -> tuple[ReplayBuffer, RefinementBuffer]:
    """
    Restore both buffers from a JSONL checkpoint
    """
    replay = ReplayBuffer()
    refinement = RefinementBuffer()
    for record in iter_jsonl(path):
        kind = record.get("type")
        if kind == "replay":
            entry = ReplayEntry.from_record(record)
            replay.entries[entry.prompt_id] = entry
        elif kind == "retired":
            replay.retired.add(str(record["prompt_id"]))
        elif kind == "refinement":
            refinement.pending.append(RefinementPrompt.from_record(record))
        elif kind == "refinement_counter":
            refinement.created = int(record["created"])
    return replay, refinement

