"""
Testing the bigram toy policy
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from proofpipe.core import PolicySnapshotId
from proofpipe.exceptions import ShapeMismatchError, VocabMismatchError
from proofpipe.simpolicy import (
    Prefix,
    ToyPolicy,
    finite_diff,
    grad_logprob,
    load_policy,
    logprob,
    sample,
    sample_batch,
    save_policy,
    sgd_update,
)
from tests.conftest import VOCAB_SIZE, ToyFixture


def chain_policy(vocab_size: int = VOCAB_SIZE, sharpness: float = 50.0) -> ToyPolicy:
    """
    Start at token 2, then always emit the next token id
    """
    params = np.zeros((vocab_size + 1, vocab_size))
    params[vocab_size, 2] = sharpness
    for previous in range(vocab_size):
        params[previous, (previous + 1) % vocab_size] = sharpness
    return ToyPolicy(vocab_size=vocab_size, params=params)


def test_uniform_logprob() -> None:
    """
    Every token costs -ln V under the uniform policy
    """
    policy = ToyPolicy.uniform(VOCAB_SIZE)
    values = logprob(policy, [0, 1], [3, 0, 5, 5])
    np.testing.assert_allclose(values, np.full(4, -math.log(VOCAB_SIZE)), rtol=0, atol=1e-15)


def test_single_token_continuations_normalize(toy_policy: ToyPolicy) -> None:
    """
    Probabilities of all single-token continuations sum to one
    """
    total = sum(math.exp(logprob(toy_policy, [], [token])[0]) for token in range(VOCAB_SIZE))
    assert math.isclose(total, 1.0, abs_tol=1e-12)
    np.testing.assert_allclose(toy_policy.row_sums(), 1.0, rtol=0, atol=1e-12)


def test_hand_set_table() -> None:
    """
    A 2x2 table matches the softmax computed by hand
    """
    params = np.array([[0.0, 1.0], [2.0, 0.0], [0.0, math.log(3.0)]])
    policy = ToyPolicy(vocab_size=2, params=params)
    # start row: probabilities 1/4 and 3/4; row of token 1: e^2 / (e^2 + 1) for token 0
    values = policy.logprob([], [1, 0])
    assert math.isclose(values[0], math.log(0.75), rel_tol=1e-12)
    assert math.isclose(values[1], 2.0 - math.log(math.exp(2.0) + 1.0), rel_tol=1e-12)


def test_logprob_rejects_unknown_tokens(toy_policy: ToyPolicy) -> None:
    """
    Token ids outside the vocabulary are rejected in prompts and targets
    """
    with pytest.raises(VocabMismatchError):
        logprob(toy_policy, [], [0, VOCAB_SIZE])
    with pytest.raises(VocabMismatchError):
        grad_logprob(toy_policy, [-1], [0])


def test_sample_near_deterministic() -> None:
    """
    A saturated table yields its argmax chain
    """
    policy = chain_policy()
    assert np.all(policy.prob_table().max(axis=1) > 0.999)
    trajectory = sample(policy, [0], max_len=4, temperature=1.0, seed=11, prompt_id="q")
    assert trajectory.tokens == (2, 3, 4, 5)
    assert trajectory.prompt_id == "q"
    assert trajectory.text == "\\boxed{2 3 4 5}"


def test_sample_is_deterministic_per_seed(toy_policy: ToyPolicy) -> None:
    """
    The same seed reproduces the same trajectory
    """
    first = sample(toy_policy, [], max_len=8, temperature=0.7, seed=3)
    second = sample(toy_policy, [], max_len=8, temperature=0.7, seed=3)
    assert first == second
    assert len(first) == 8


def test_sampled_logprobs_match_policy(toy_policy: ToyPolicy) -> None:
    """
    At temperature one, recorded logprobs equal the policy's bit for bit
    """
    trajectories = sample_batch(
        toy_policy, [f"q{i}" for i in range(50)], 8, 1.0, np.random.default_rng(0)
    )
    for trajectory in trajectories:
        recorded = np.asarray(trajectory.sampling_logprobs)
        assert np.array_equal(recorded, toy_policy.logprob([], trajectory.tokens))


def test_high_temperature_is_uniform(toy_policy: ToyPolicy) -> None:
    """
    A very hot policy emits every token equally often
    """
    draws = 20_000
    trajectories = sample_batch(
        toy_policy, ["q"] * draws, 5, 1e6, np.random.default_rng(1234)
    )
    tokens = np.concatenate([np.asarray(trajectory.tokens) for trajectory in trajectories])
    assert tokens.size == 100_000
    counts = np.bincount(tokens, minlength=VOCAB_SIZE)
    p = 1.0 / VOCAB_SIZE
    sigma = math.sqrt(tokens.size * p * (1 - p))
    assert np.all(np.abs(counts - tokens.size * p) < 4 * sigma)


def test_end_token_and_truncation() -> None:
    """
    Rows stop after the end token; rows hitting max_len without it are truncated
    """
    ending = chain_policy()
    ending = ToyPolicy(vocab_size=VOCAB_SIZE, params=ending.params, end_token=4)
    finished = sample(ending, [], max_len=8, temperature=1.0, seed=0)
    assert finished.tokens == (2, 3, 4)
    assert not finished.truncated
    cut = sample(ending, [], max_len=2, temperature=1.0, seed=0)
    assert cut.tokens == (2, 3)
    assert cut.truncated


def test_sample_resumes_from_prefix() -> None:
    """
    A prefix keeps its tokens, logprobs and source snapshot
    """
    policy = chain_policy()
    prefix = Prefix(tokens=(0, 1), logprobs=(-0.5, -0.25), source_policy=9)
    resumed = sample(policy, [], max_len=4, temperature=1.0, seed=0, prefix=prefix)
    assert resumed.tokens == (0, 1, 2, 3)
    assert resumed.sampling_logprobs[:2] == (-0.5, -0.25)
    assert resumed.prefix_length == 2
    assert resumed.prefix_source_policy == 9


def test_max_new_tokens_limits_generation(toy_policy: ToyPolicy) -> None:
    """
    Each row generates at most max_new_tokens beyond its prefix
    """
    prefix = Prefix(tokens=(1,), logprobs=(-1.0,), source_policy=0)
    rows = sample_batch(
        toy_policy, ["a", "b"], 8, 1.0, np.random.default_rng(0), [prefix, None], 3
    )
    assert [len(row) for row in rows] == [4, 3]


def test_sample_rejects_bad_arguments(toy_policy: ToyPolicy) -> None:
    """
    max_len and temperature must be positive
    """
    with pytest.raises(ValueError, match="max_len"):
        sample(toy_policy, [], max_len=0, temperature=1.0, seed=0)
    with pytest.raises(ValueError, match="temperature"):
        sample(toy_policy, [], max_len=3, temperature=0.0, seed=0)


def test_grad_logprob_matches_finite_differences(toy_policy: ToyPolicy) -> None:
    """
    The analytic gradient agrees with central differences
    """
    target = [4, 1, 1, 0, 5]

    def objective(params: np.ndarray) -> float:
        return float(toy_policy.with_params(params).logprob([], target).sum())

    numeric = finite_diff(objective, toy_policy.params, h=1e-6)
    analytic = grad_logprob(toy_policy, [], target)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_grad_logprob_rows_sum_to_zero(toy_policy: ToyPolicy) -> None:
    """
    Each softmax row of the gradient sums to zero
    """
    gradient = grad_logprob(toy_policy, [], [0, 3, 3, 2])
    np.testing.assert_allclose(gradient.sum(axis=1), 0.0, atol=1e-12)


def test_saturated_gradient_vanishes() -> None:
    """
    A realized token of probability ~1 contributes almost nothing
    """
    gradient = grad_logprob(chain_policy(), [], [2, 3, 4])
    assert np.abs(gradient).max() < 1e-9


def test_weighted_grad_shape_mismatch(toy_policy: ToyPolicy) -> None:
    """
    Sequences and weights must pair up
    """
    with pytest.raises(ShapeMismatchError):
        toy_policy.weighted_grad([[1, 2]], [1.0, 2.0])


def test_finite_diff_quadratic(rng: np.random.Generator) -> None:
    """
    Central differences are exact for a quadratic
    """
    theta = rng.normal(size=(3, 4))
    gradient = finite_diff(lambda params: float(np.sum(params**2)), theta, h=1e-5)
    np.testing.assert_allclose(gradient, 2 * theta, rtol=0, atol=1e-8)


def test_finite_diff_constant(rng: np.random.Generator) -> None:
    """
    A constant objective has zero gradient
    """
    gradient = finite_diff(lambda _params: 4.2, rng.normal(size=(2, 2)))
    assert np.array_equal(gradient, np.zeros((2, 2)))
    with pytest.raises(ValueError, match="positive"):
        finite_diff(lambda _params: 0.0, np.zeros(1), h=0)


def test_sgd_update_zero_rate(toy_policy: ToyPolicy) -> None:
    """
    A zero learning rate keeps the parameters but advances the snapshot
    """
    updated = sgd_update(toy_policy, np.ones_like(toy_policy.params), 0.0)
    assert np.array_equal(updated.params, toy_policy.params)
    assert updated.snapshot == PolicySnapshotId(1)
    assert sgd_update(updated, np.zeros_like(updated.params), 0.0).snapshot > updated.snapshot


def test_sgd_update_raises_logprob(toy_policy: ToyPolicy) -> None:
    """
    Ascending the gradient of a positively rewarded trajectory makes it likelier
    """
    target = [3, 1, 4, 1]
    before = toy_policy.logprob([], target).sum()
    updated = sgd_update(toy_policy, grad_logprob(toy_policy, [], target), 0.1)
    assert updated.logprob([], target).sum() > before
    np.testing.assert_allclose(updated.row_sums(), 1.0, rtol=0, atol=1e-12)


def test_sgd_update_errors(toy_policy: ToyPolicy) -> None:
    """
    Negative rates and mis-shaped gradients are rejected
    """
    with pytest.raises(ValueError, match="non-negative"):
        sgd_update(toy_policy, np.zeros_like(toy_policy.params), -0.1)
    with pytest.raises(ShapeMismatchError):
        sgd_update(toy_policy, np.zeros((2, 2)), 0.1)


def test_policy_json_round_trip(toy: ToyFixture) -> None:
    """
    Saved policies load with identical parameters and snapshot
    """
    policy = sgd_update(toy.policy, np.zeros_like(toy.policy.params), 0.0)
    path = toy.workspace / "policy.json"
    save_policy(policy, path)
    loaded = load_policy(path)
    assert np.array_equal(loaded.params, policy.params)
    assert loaded.snapshot == policy.snapshot
    assert loaded.vocab_size == VOCAB_SIZE


def test_policy_from_dict_checks_size() -> None:
    """
    A flat parameter list of the wrong size is rejected
    """
    with pytest.raises(ShapeMismatchError, match="Expected 6 parameters"):
        ToyPolicy.from_dict({"vocab_size": 2, "params": [0.0] * 5})
