"""
Testing the shared domain types
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from proofpipe.core import (
    PolicySnapshotId,
    Prompt,
    PromptKind,
    Trajectory,
    build_prompt_pool,
    group_stats,
    named_rng,
    validate_trajectory,
)
from proofpipe.exceptions import (
    DuplicatePromptError,
    EmptyInputError,
    InvalidPromptError,
    MixedPromptError,
    UnscoredError,
)
from tests.conftest import make_trajectory


def test_verifiable_prompt_requires_reference() -> None:
    """
    A verifiable prompt without a reference answer is rejected
    """
    with pytest.raises(InvalidPromptError, match="no reference answer"):
        Prompt(id="q", text="What is 1+1?", kind=PromptKind.VERIFIABLE)


def test_prompt_pool_rejects_duplicates() -> None:
    """
    Two prompts with the same id cannot share a pool
    """
    prompts = [Prompt(id="a", text="x"), Prompt(id="b", text="y"), Prompt(id="a", text="z")]
    with pytest.raises(DuplicatePromptError, match="'a'"):
        build_prompt_pool(prompts)


def test_prompt_pool_keeps_order() -> None:
    """
    The pool is keyed by id in insertion order
    """
    pool = build_prompt_pool([Prompt(id="b", text="y"), Prompt(id="a", text="x")])
    assert list(pool) == ["b", "a"]
    assert not pool["a"].is_verifiable


def test_snapshot_ids() -> None:
    """
    Snapshot ids advance by one and never go negative
    """
    assert PolicySnapshotId(3).next() == PolicySnapshotId(4)
    assert PolicySnapshotId(1) < PolicySnapshotId(2)
    with pytest.raises(ValueError, match="non-negative"):
        PolicySnapshotId(-1)


def test_group_stats() -> None:
    """
    Mean reward and success count of a scored group
    """
    members = [
        make_trajectory("q", [1, 2], reward=reward) for reward in (1.0, 0.0, 0.0, 1.0, 1.0)
    ]
    group = group_stats(members)
    assert group.prompt_id == "q"
    assert len(group) == 5
    assert group.success_count == 3
    assert math.isclose(group.mean_reward, 0.6)
    assert group.rewards == [1.0, 0.0, 0.0, 1.0, 1.0]


def test_group_stats_errors() -> None:
    """
    Empty, mixed and unscored groups are rejected
    """
    with pytest.raises(EmptyInputError):
        group_stats([])
    with pytest.raises(MixedPromptError, match="a, b"):
        group_stats([make_trajectory("a", [1], 1.0), make_trajectory("b", [1], 0.0)])
    with pytest.raises(UnscoredError):
        group_stats([make_trajectory("a", [1], 1.0), make_trajectory("a", [2])])


def test_validate_trajectory() -> None:
    """
    Each violated invariant is reported
    """
    assert validate_trajectory(make_trajectory("q", [0, 1, 2], reward=1.0)) == []
    broken = Trajectory(
        prompt_id="q",
        tokens=(1, -2),
        sampling_logprobs=(0.5, float("nan"), -1.0),
        reward=0.5,
        prefix_length=4,
    )
    assert validate_trajectory(broken) == [
        "length mismatch",
        "positive logprob",
        "nan logprob",
        "negative token id",
        "reward outside {0,1}",
        "prefix longer than trajectory",
    ]


def test_trajectory_record() -> None:
    """
    Resumed trajectories keep their prefix provenance in the record
    """
    trajectory = Trajectory(
        prompt_id="q",
        tokens=(3, 4, 5),
        sampling_logprobs=(-0.1, -0.2, -0.3),
        source_policy=7,
        reward=0.0,
        truncated=True,
        prefix_length=2,
        prefix_source_policy=6,
    )
    record = trajectory.to_record()
    assert record["prefix_source_policy"] == 6
    assert "text" not in record
    assert Trajectory.from_record(record) == trajectory
    assert "prefix_length" not in make_trajectory("q", [1]).to_record()


def test_with_reward() -> None:
    """
    Scoring returns a copy
    """
    trajectory = make_trajectory("q", [1, 1])
    scored = trajectory.with_reward(1)
    assert not trajectory.is_scored
    assert scored.reward == 1.0
    assert scored.tokens == trajectory.tokens


def test_named_rng_streams() -> None:
    """
    Streams are reproducible per name and differ across names
    """
    first = named_rng(5, "rollout").random(4)
    again = named_rng(5, "rollout").random(4)
    other = named_rng(5, "shuffle").random(4)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
