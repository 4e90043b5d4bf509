"""
Testing the replay and refinement buffers
"""

from __future__ import annotations

import collections
import math
import threading
import time
from collections import Counter
from typing import Sequence

import numpy as np
import pytest

from proofpipe.buffers import (
    BufferConfig,
    RefinementBuffer,
    ReplayBuffer,
    ReplayEntry,
    assemble_batch,
    batch_slots,
    entropy_estimate,
    load_buffers,
    refinement_enqueue,
    save_buffers,
)
from proofpipe.core import PolicySnapshotId, Prompt, PromptKind, group_stats
from proofpipe.exceptions import (
    ConfigValidationError,
    EmptyFreshQueueError,
    NotInBufferError,
    PolicyEvalError,
)
from proofpipe.simpolicy import ToyPolicy
from tests.conftest import VOCAB_SIZE, ToyFixture, make_group, make_trajectory

CFG = BufferConfig()


class CertainTopK:
    """
    Puts all probability on one token at every position
    """

    snapshot = PolicySnapshotId(0)

    def topk_probs(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int], k: int
    ) -> np.ndarray:
        """
        A single outcome of probability one per position
        """
        return np.ones((len(target_tokens), 1))


class BrokenTopK:
    """
    Returns a table of the wrong shape
    """

    snapshot = PolicySnapshotId(0)

    def topk_probs(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int], k: int
    ) -> np.ndarray:
        """
        One row too few
        """
        return np.ones((len(target_tokens) - 1, 1))


def prompt(prompt_id: str, kind: PromptKind = PromptKind.VERIFIABLE) -> Prompt:
    """
    A prompt with a reference answer
    """
    return Prompt(id=prompt_id, text=f"Prove {prompt_id}", kind=kind, reference_answer="1")


def oracle_entropy(policy: ToyPolicy, tokens: Sequence[int], k: int) -> float:
    """
    Enumerate each conditional, keep the top k, lump the rest, average the entropies
    """
    table = policy.prob_table()
    previous = policy.start_index
    entropies = []
    for token in tokens:
        row = sorted(table[previous].tolist(), reverse=True)
        kept = row[:k]
        residual = 1.0 - sum(kept)
        outcomes = kept + ([residual] if residual > 1e-12 else [])
        entropies.append(-sum(p * math.log(p) for p in outcomes if p > 0))
        previous = token
    return sum(entropies) / len(entropies)


def test_entropy_of_certain_policy_is_zero() -> None:
    """
    Probability one everywhere has zero entropy
    """
    trajectory = make_trajectory("q", [1, 2, 3], reward=1.0)
    assert entropy_estimate(trajectory, CertainTopK(), CFG) == 0.0


def test_entropy_of_uniform_policy() -> None:
    """
    A uniform policy over at most k tokens has entropy ln V
    """
    trajectory = make_trajectory("q", [0, 5, 5, 2], reward=1.0)
    value = entropy_estimate(trajectory, ToyPolicy.uniform(VOCAB_SIZE), CFG)
    assert value == pytest.approx(math.log(VOCAB_SIZE), rel=1e-12)


@pytest.mark.parametrize("vocab_size", [6, 24])
def test_entropy_matches_enumeration(vocab_size: int, rng: np.random.Generator) -> None:
    """
    Top-16 entropy with a residual bucket equals full enumeration
    """
    policy = ToyPolicy.random(vocab_size, rng, scale=2.0)
    tokens = rng.integers(0, vocab_size, size=4).tolist()
    trajectory = make_trajectory("q", tokens, reward=1.0, policy=policy)
    expected = oracle_entropy(policy, tokens, 16)
    assert entropy_estimate(trajectory, policy, CFG) == pytest.approx(expected, rel=1e-10)


def test_entropy_edge_cases() -> None:
    """
    An empty trajectory has zero entropy; malformed tables are policy errors
    """
    assert entropy_estimate(make_trajectory("q", [], reward=1.0), BrokenTopK(), CFG) == 0.0
    with pytest.raises(PolicyEvalError, match="shape"):
        entropy_estimate(make_trajectory("q", [1, 2], reward=1.0), BrokenTopK(), CFG)


@pytest.mark.parametrize(
    ("successes", "admitted"), [(0, False), (1, True), (2, False), (5, False)]
)
def test_admit_exactly_one_success(
    successes: int, admitted: bool, rng: np.random.Generator
) -> None:
    """
    Only hard-but-solvable groups are admitted
    """
    buffer = ReplayBuffer()
    rewards = [1.0] * successes + [0.0] * (8 - successes)
    assert buffer.admit(make_group("q", rewards, rng), ToyPolicy.uniform(6), CFG) is admitted
    assert ("q" in buffer) is admitted
    assert buffer.trajectory_count == (1 if admitted else 0)


def test_admit_rate_rule(rng: np.random.Generator) -> None:
    """
    The rate rule compares the success fraction against admit_rate_max
    """
    cfg = BufferConfig(admission_rule="rate", admit_rate_max=0.3, retire_rate_min=0.5)
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    buffer = ReplayBuffer()
    two_successes = group_stats(
        [make_trajectory("a", [1], 1.0), make_trajectory("a", [2], 1.0)]
        + [make_trajectory("a", [3], 0.0)] * 6
    )
    assert buffer.admit(two_successes, policy, cfg)
    assert not buffer.admit(make_group("b", [1.0] * 3 + [0.0] * 5, rng), policy, cfg)
    assert buffer.trajectory_count == 2
    assert not buffer.retire("a", 3, cfg, group_size=8)
    assert buffer.retire("a", 4, cfg, group_size=8)


def test_admit_deduplicates_and_stores_successes_only() -> None:
    """
    Repeated token sequences and failures never enter the buffer
    """
    buffer = ReplayBuffer()
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    group = group_stats(
        [make_trajectory("q", [1, 2], reward=1.0)]
        + [make_trajectory("q", [1, 2], reward=0.0)] * 7
    )
    assert buffer.admit(group, policy, CFG)
    assert buffer.admit(group, policy, CFG)
    entry = buffer.entries["q"]
    assert len(entry.trajectories) == 1
    assert len(entry.entropy_estimates) == 1
    assert all(trajectory.reward == 1.0 for trajectory in entry.trajectories)


def test_retire(rng: np.random.Generator) -> None:
    """
    Four fresh successes retire a prompt for good
    """
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    buffer = ReplayBuffer()
    group = make_group("q", [1.0] + [0.0] * 7, rng)
    buffer.admit(group, policy, CFG)
    assert not buffer.retire("q", 3, CFG)
    assert buffer.retire("q", 4, CFG)
    assert not buffer.retire("missing", 8, CFG)
    with pytest.raises(NotInBufferError):
        buffer.select("q", policy, CFG)
    assert not buffer.admit(group, policy, CFG)


def test_admit_sees_retirement_made_while_waiting(rng: np.random.Generator) -> None:
    """
    An admission blocked on the buffer lock honors a retirement made meanwhile
    """
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    buffer = ReplayBuffer()
    group = make_group("q", [1.0] + [0.0] * 7, rng)
    results: list[bool] = []
    with buffer.lock:
        worker = threading.Thread(target=lambda: results.append(buffer.admit(group, policy, CFG)))
        worker.start()
        time.sleep(0.1)
        buffer.retired.add("q")
    worker.join(timeout=5)
    assert results == [False]
    assert "q" not in buffer


def test_select_lowest_entropy(toy_policy: ToyPolicy, rng: np.random.Generator) -> None:
    """
    The stored trajectory with the lowest current entropy is replayed
    """
    buffer = ReplayBuffer()
    stored = [
        make_trajectory("q", rng.integers(0, VOCAB_SIZE, size=5).tolist(), reward=1.0)
        for _ in range(5)
    ]
    buffer.entries["q"] = ReplayEntry(prompt_id="q", trajectories=list(stored))
    estimates = [entropy_estimate(trajectory, toy_policy, CFG) for trajectory in stored]
    best = 0
    for position, value in enumerate(estimates):
        if value < estimates[best]:
            best = position
    assert buffer.select("q", toy_policy, CFG) == stored[best]
    assert buffer.entries["q"].entropy_estimates == estimates


def test_select_single_and_ties() -> None:
    """
    A singleton is returned as is; equal entropies go to the earliest entry
    """
    uniform = ToyPolicy.uniform(VOCAB_SIZE)
    buffer = ReplayBuffer()
    first = make_trajectory("q", [1, 2], reward=1.0)
    buffer.entries["q"] = ReplayEntry(prompt_id="q", trajectories=[first])
    assert buffer.select("q", uniform, CFG) == first
    second = make_trajectory("q", [3, 4], reward=1.0)
    buffer.entries["q"].trajectories.append(second)
    assert buffer.select("q", uniform, CFG) == first
    with pytest.raises(NotInBufferError):
        buffer.select("other", uniform, CFG)


def test_replay_lifecycle_fuzz(rng: np.random.Generator) -> None:
    """
    Ten thousand random operations keep every replay invariant
    """
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    buffer = ReplayBuffer()
    refinement = RefinementBuffer()
    prompt_ids = [f"q{index}" for index in range(40)]
    for _ in range(10_000):
        operation = rng.integers(0, 4)
        prompt_id = prompt_ids[int(rng.integers(0, len(prompt_ids)))]
        if operation == 0:
            successes = int(rng.integers(0, 4))
            members = [
                make_trajectory(
                    prompt_id,
                    rng.integers(0, 2, size=int(rng.integers(1, 3))).tolist(),
                    reward=1.0 if position < successes else 0.0,
                )
                for position in range(8)
            ]
            was_retired = prompt_id in buffer.retired
            admitted = buffer.admit(group_stats(members), policy, CFG)
            assert admitted == (successes == 1 and not was_retired)
        elif operation == 1:
            buffer.retire(prompt_id, int(rng.integers(0, 9)), CFG)
        elif operation == 2:
            queue = collections.deque(prompt(pid) for pid in prompt_ids)
            plan = assemble_batch(queue, refinement, buffer, 32, CFG)
            assert not set(plan.replay) & buffer.retired
        elif prompt_id in buffer:
            assert buffer.select(prompt_id, policy, CFG).reward == 1.0
        assert not set(buffer.entries) & buffer.retired
        for entry in buffer.entries.values():
            tokens = [trajectory.tokens for trajectory in entry.trajectories]
            assert len(tokens) == len(set(tokens))
            assert all(trajectory.reward == 1.0 for trajectory in entry.trajectories)
            assert len(entry.entropy_estimates) == len(entry.trajectories)


def test_refinement_enqueue_gate(rng: np.random.Generator) -> None:
    """
    Low-reward groups enqueue exactly their failed members
    """
    buffer = RefinementBuffer()
    original = prompt("q")
    low = make_group("q", [0.0, 0.0, 1.0, 0.0], rng)
    assert refinement_enqueue(buffer, low, original, CFG, PolicySnapshotId(3)) == 3
    boundary = make_group("q", [1.0, 1.0, 0.0, 0.0], rng)
    assert refinement_enqueue(buffer, boundary, original, CFG) == 0
    assert len(buffer) == 3
    items = buffer.take(10)
    assert [item.prompt_id for item in items] == ["q#refine-0", "q#refine-1", "q#refine-2"]
    assert [item.failed_response for item in items] == [
        member.text for member in low.members if member.reward == 0.0
    ]
    assert all(item.created_at == PolicySnapshotId(3) for item in items)


def test_refinement_groups_never_reenqueue(rng: np.random.Generator) -> None:
    """
    Failed refinement attempts do not spawn further refinement prompts
    """
    buffer = RefinementBuffer()
    item = buffer.push(prompt("q"), "wrong answer", PolicySnapshotId(0))
    refined = item.to_prompt()
    assert refined.kind is PromptKind.REFINEMENT
    assert refined.parent_id == "q"
    assert refined.reference_answer == "1"
    assert "Prove q" in refined.text
    assert "wrong answer" in refined.text
    group = make_group(refined.id, [0.0] * 8, rng)
    assert refinement_enqueue(buffer, group, refined, CFG) == 0
    assert len(buffer) == 1


def test_batch_composition_full_buffers() -> None:
    """
    B=128 with full buffers: 25 refinement, 25 replay, 78 fresh
    """
    refinement, replay = filled_buffers(40, 40)
    queue = collections.deque(prompt(f"f{index}") for index in range(200))
    plan = assemble_batch(queue, refinement, replay, 128, CFG)
    assert (len(plan.refinement), len(plan.replay), len(plan.fresh)) == (25, 25, 78)
    assert len(plan.displaced) == 25
    assert plan.size == 128


def test_batch_slots_match_assembled_batch() -> None:
    """
    Slot counts are known before any prompt leaves the queue
    """
    for sizes, expected in [((40, 40), (25, 25, 78)), ((0, 0), (0, 0, 128)), ((3, 1), (3, 1, 124))]:
        refinement, replay = filled_buffers(*sizes)
        assert batch_slots(refinement, replay, 128, CFG) == expected
        queue = collections.deque(prompt(f"f{index}") for index in range(200))
        plan = assemble_batch(queue, refinement, replay, 128, CFG)
        assert (len(plan.refinement), len(plan.replay), len(plan.fresh)) == expected


def test_batch_composition_degenerate() -> None:
    """
    Empty buffers give an all-fresh batch; rho 0 leaves only refinement and fresh
    """
    refinement, replay = filled_buffers(0, 0)
    queue = collections.deque(prompt(f"f{index}") for index in range(200))
    plan = assemble_batch(queue, refinement, replay, 128, CFG)
    assert len(plan.fresh) == 128
    refinement, replay = filled_buffers(5, 5)
    small = assemble_batch(
        collections.deque(prompt(f"f{index}") for index in range(20)),
        refinement,
        replay,
        10,
        BufferConfig(replay_ratio=0.0),
    )
    assert (len(small.refinement), len(small.replay), len(small.fresh)) == (2, 0, 8)


def test_batch_requires_fresh_prompts() -> None:
    """
    An empty fresh queue cannot feed a batch
    """
    refinement, replay = filled_buffers(3, 3)
    with pytest.raises(EmptyFreshQueueError):
        assemble_batch(collections.deque(), refinement, replay, 8, CFG)


def filled_buffers(n_refinement: int, n_replay: int) -> tuple[RefinementBuffer, ReplayBuffer]:
    """
    Buffers holding the given number of pending prompts and replay entries
    """
    refinement = RefinementBuffer()
    for index in range(n_refinement):
        refinement.push(prompt(f"r{index}"), "bad", PolicySnapshotId(0))
    replay = ReplayBuffer()
    for index in range(n_replay):
        replay.entries[f"e{index}"] = ReplayEntry(
            prompt_id=f"e{index}", trajectories=[make_trajectory(f"e{index}", [1], 1.0)]
        )
    return refinement, replay


def test_batch_composition_fuzz(rng: np.random.Generator) -> None:
    """
    A thousand random buffer states: floor slot counts and fresh prompt conservation
    """
    for trial in range(1_000):
        n_refinement = int(rng.integers(0, 40))
        n_replay = int(rng.integers(0, 40))
        refinement, replay = filled_buffers(n_refinement, n_replay)
        queue = collections.deque(
            prompt(f"t{trial}-f{index}") for index in range(int(rng.integers(1, 300)))
        )
        holding = collections.deque(
            prompt(f"t{trial}-h{index}") for index in range(int(rng.integers(0, 30)))
        )
        before = Counter(item.id for item in [*holding, *queue])
        plan = assemble_batch(queue, refinement, replay, 128, CFG, holding)
        n_ref = min(25, n_refinement)
        n_rep = min(math.floor(0.25 * (128 - n_ref)), n_replay)
        assert len(plan.refinement) == n_ref
        assert len(plan.replay) == n_rep
        assert len(plan.fresh) <= 128 - n_ref - n_rep
        after = Counter(item.id for item in [*plan.fresh, *holding, *queue])
        assert after == before
        if n_refinement >= 25 and n_replay >= 25:
            assert (len(plan.refinement), len(plan.replay)) == (25, 25)


def test_buffers_round_trip(toy: ToyFixture, rng: np.random.Generator) -> None:
    """
    A checkpoint restores both buffers exactly
    """
    replay = ReplayBuffer()
    replay.admit(make_group("a", [1.0] + [0.0] * 7, rng), toy.policy, CFG)
    replay.admit(make_group("b", [1.0] + [0.0] * 7, rng), toy.policy, CFG)
    replay.retire("b", 5, CFG)
    refinement = RefinementBuffer()
    refinement_enqueue(refinement, make_group("c", [0.0] * 4, rng), prompt("c"), CFG)
    refinement.take(1)
    path = toy.workspace / "buffers.jsonl"
    save_buffers(path, replay, refinement)
    restored_replay, restored_refinement = load_buffers(path)
    assert restored_replay.to_records() == replay.to_records()
    assert restored_replay.retired == {"b"}
    assert restored_refinement.to_records() == refinement.to_records()
    assert restored_refinement.created == 4


def test_buffer_config_validation() -> None:
    """
    Out-of-range settings name their key
    """
    with pytest.raises(ConfigValidationError, match="replay_ratio"):
        BufferConfig(replay_ratio=1.0)
    with pytest.raises(ConfigValidationError, match="admit_success_max"):
        BufferConfig(admit_success_max=5, retire_success_min=4)
    with pytest.raises(ConfigValidationError, match="tau_ref"):
        BufferConfig(tau_ref=0.0)
