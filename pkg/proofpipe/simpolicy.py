"""
Differentiable bigram toy policy

The policy is a softmax table indexed by (previous token, next token),
with an extra start row used for the first response position. Prompt
tokens are validated against the vocabulary but never condition the
distribution.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import pathlib
from typing import Any, Callable, Sequence

import numpy as np

from proofpipe.core import PolicySnapshotId, Trajectory
from proofpipe.exceptions import PolicyEvalError, ShapeMismatchError, VocabMismatchError

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """
    Row-wise log-softmax
    """
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def render_tokens(tokens: Sequence[int]) -> str:
    """
    Text form of a toy response, the token ids inside a final-answer box
    """
    return "\\boxed{" + " ".join(str(token) for token in tokens) + "}"


@dataclasses.dataclass(frozen=True, eq=False)
class ToyPolicy:
    """
    Bigram softmax policy over a small vocabulary

    ``params`` has shape ``(vocab_size + 1, vocab_size)``; row
    ``vocab_size`` is the start row. The table is read-only, updates
    produce a new policy with the next snapshot id.
    """

    vocab_size: int
    params: np.ndarray
    snapshot: PolicySnapshotId = PolicySnapshotId()
    end_token: int | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 2:  # noqa: PLR2004
            msg = f"vocab_size must be at least 2, got {self.vocab_size}"
            raise ValueError(msg)
        params = np.array(self.params, dtype=np.float64)
        expected_shape = (self.vocab_size + 1, self.vocab_size)
        if params.shape != expected_shape:
            msg = f"Parameter table has shape {params.shape}, expected {expected_shape}"
            raise ShapeMismatchError(msg)
        if self.end_token is not None and not 0 <= self.end_token < self.vocab_size:
            msg = f"end_token {self.end_token} outside vocabulary of size {self.vocab_size}"
            raise VocabMismatchError(msg)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def uniform(cls, vocab_size: int, end_token: int | None = None) -> ToyPolicy:
        """
        Policy with all logits zero
        """
        return cls(
            vocab_size=vocab_size,
            params=np.zeros((vocab_size + 1, vocab_size)),
            end_token=end_token,
        )

    @classmethod
    def random(
        cls,
        vocab_size: int,
        rng: np.random.Generator,
        scale: float = 1.0,
        end_token: int | None = None,
    ) -> ToyPolicy:
        """
        Policy with Gaussian logits
        """
        return cls(
            vocab_size=vocab_size,
            params=rng.normal(0.0, scale, size=(vocab_size + 1, vocab_size)),
            end_token=end_token,
        )

    @property
    def start_index(self) -> int:
        """
        Row used for the first response position
        """
        return self.vocab_size

    def with_params(self, params: np.ndarray) -> ToyPolicy:
        """
        Same policy and snapshot with a different parameter table
        """
        return dataclasses.replace(self, params=params)

    @functools.cached_property
    def _unit_log_table(self) -> np.ndarray:
        table = log_softmax(self.params)
        table.setflags(write=False)
        return table

    def log_table(self, temperature: float = 1.0) -> np.ndarray:
        """
        Conditional log-probabilities at a sampling temperature
        """
        if temperature <= 0:
            msg = f"temperature must be positive, got {temperature}"
            raise ValueError(msg)
        if temperature == 1.0:
            return self._unit_log_table
        return log_softmax(self.params / temperature)

    def prob_table(self, temperature: float = 1.0) -> np.ndarray:
        """
        Conditional probabilities at a sampling temperature
        """
        return np.exp(self.log_table(temperature))

    def row_sums(self) -> np.ndarray:
        """
        Total probability of every softmax row
        """
        return self.prob_table().sum(axis=1)

    def check_tokens(self, tokens: Sequence[int]) -> None:
        """
        Raise when a token id is outside the vocabulary
        """
        for token in tokens:
            if not 0 <= int(token) < self.vocab_size:
                msg = f"Token id {token} outside vocabulary of size {self.vocab_size}"
                raise VocabMismatchError(msg)

    def contexts(self, target_tokens: Sequence[int]) -> np.ndarray:
        """
        Conditioning row for every target position
        """
        previous = [self.start_index, *(int(token) for token in target_tokens[:-1])]
        return np.asarray(previous[: len(target_tokens)], dtype=np.int64)

    def logprob(self, prompt_tokens: Sequence[int], target_tokens: Sequence[int]) -> np.ndarray:
        """
        Per-token log-probabilities of ``target_tokens``
        """
        self.check_tokens(prompt_tokens)
        self.check_tokens(target_tokens)
        if len(target_tokens) == 0:
            return np.zeros(0)
        targets = np.asarray(target_tokens, dtype=np.int64)
        return self._unit_log_table[self.contexts(target_tokens), targets]

    def batch_logprobs(self, sequences: Sequence[Sequence[int]]) -> list[np.ndarray]:
        """
        Per-token log-probabilities for many responses in one table lookup
        """
        if not sequences:
            return []
        for sequence in sequences:
            self.check_tokens(sequence)
        previous = np.concatenate([self.contexts(sequence) for sequence in sequences])
        targets = np.concatenate([np.asarray(sequence, dtype=np.int64) for sequence in sequences])
        flat = self._unit_log_table[previous, targets]
        splits = np.cumsum([len(sequence) for sequence in sequences])[:-1]
        return np.split(flat, splits)

    def grad_logprob(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int]
    ) -> np.ndarray:
        """
        Gradient of the summed target log-probability with respect to ``params``
        """
        self.check_tokens(prompt_tokens)
        return self.weighted_grad([target_tokens], [1.0])

    def weighted_grad(
        self, sequences: Sequence[Sequence[int]], weights: Sequence[float]
    ) -> np.ndarray:
        """
        Gradient of ``sum_i weights[i] * sum_t log pi(o_it)``

        Every position adds its weight on the realized cell and subtracts
        the weighted probability row.
        """
        if len(sequences) != len(weights):
            msg = f"{len(sequences)} sequences but {len(weights)} weights"
            raise ShapeMismatchError(msg)
        gradient = np.zeros_like(self.params)
        non_empty = [(seq, w) for seq, w in zip(sequences, weights) if len(seq) > 0]
        if not non_empty:
            return gradient
        for sequence, _ in non_empty:
            self.check_tokens(sequence)
        previous = np.concatenate([self.contexts(seq) for seq, _ in non_empty])
        targets = np.concatenate([np.asarray(seq, dtype=np.int64) for seq, _ in non_empty])
        position_weights = np.concatenate(
            [np.full(len(seq), float(w)) for seq, w in non_empty]
        )
        np.add.at(gradient, (previous, targets), position_weights)
        row_weights = np.bincount(
            previous, weights=position_weights, minlength=self.vocab_size + 1
        )
        gradient -= row_weights[:, None] * self.prob_table()
        return gradient

    def topk_probs(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int], k: int
    ) -> np.ndarray:
        """
        The ``k`` largest next-token probabilities at every target position
        """
        self.check_tokens(prompt_tokens)
        self.check_tokens(target_tokens)
        rows = self.prob_table()[self.contexts(target_tokens)]
        return -np.sort(-rows, axis=1)[:, :k]

    def to_dict(self) -> dict[str, Any]:
        """
        JSON form: vocabulary size, row-major parameters and snapshot
        """
        data: dict[str, Any] = {
            "vocab_size": self.vocab_size,
            "params": [float(value) for value in self.params.ravel()],
            "snapshot": self.snapshot.step_index,
        }
        if self.end_token is not None:
            data["end_token"] = self.end_token
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ToyPolicy:
        """
        Build a policy from its JSON form
        """
        vocab_size = int(data["vocab_size"])
        params = np.asarray(data["params"], dtype=np.float64)
        if params.ndim == 1:
            if params.size != (vocab_size + 1) * vocab_size:
                msg = f"Expected {(vocab_size + 1) * vocab_size} parameters, got {params.size}"
                raise ShapeMismatchError(msg)
            params = params.reshape(vocab_size + 1, vocab_size)
        end_token = data.get("end_token")
        return cls(
            vocab_size=vocab_size,
            params=params,
            snapshot=PolicySnapshotId(int(data.get("snapshot", 0))),
            end_token=None if end_token is None else int(end_token),
        )


def load_policy(path: pathlib.Path) -> ToyPolicy:
    """
    Read a policy JSON file
    """
    return ToyPolicy.from_dict(json.loads(pathlib.Path(path).read_text(encoding="utf-8")))


def save_policy(policy: ToyPolicy, path: pathlib.Path) -> None:
    """
    Write a policy JSON file
    """
    pathlib.Path(path).write_text(json.dumps(policy.to_dict()), encoding="utf-8")


@dataclasses.dataclass(frozen=True)
class Prefix:
    """
    Already generated tokens a sampled response continues from
    """

    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    source_policy: int


def sample_batch(
    policy: ToyPolicy,
    prompt_ids: Sequence[str],
    max_len: int,
    temperature: float,
    rng: np.random.Generator,
    prefixes: Sequence[Prefix | None] | None = None,
    max_new_tokens: int | None = None,
) -> list[Trajectory]:
    """
    Sample one response per prompt id, all rows advancing together

    A row stops at ``max_len`` tokens, after the end token, or after
    ``max_new_tokens`` freshly generated tokens. Recorded log-probabilities
    are at the sampling temperature.
    """
    if max_len < 1:
        msg = f"max_len must be at least 1, got {max_len}"
        raise ValueError(msg)
    count = len(prompt_ids)
    if prefixes is None:
        prefixes = [None] * count
    elif len(prefixes) != count:
        msg = f"{count} prompts but {len(prefixes)} prefixes"
        raise ShapeMismatchError(msg)
    table = policy.log_table(temperature)
    cumulative = np.cumsum(np.exp(table), axis=1)
    tokens: list[list[int]] = []
    logprobs: list[list[float]] = []
    for prefix in prefixes:
        if prefix is not None:
            policy.check_tokens(prefix.tokens)
        tokens.append(list(prefix.tokens) if prefix else [])
        logprobs.append(list(prefix.logprobs) if prefix else [])
    previous = np.array(
        [row[-1] if row else policy.start_index for row in tokens], dtype=np.int64
    )
    lengths = np.array([len(row) for row in tokens], dtype=np.int64)
    ended = np.array(
        [bool(row) and row[-1] == policy.end_token for row in tokens], dtype=bool
    )
    generated = np.zeros(count, dtype=np.int64)
    budget = max_len if max_new_tokens is None else max_new_tokens
    while True:
        active = np.flatnonzero(~ended & (lengths < max_len) & (generated < budget))
        if active.size == 0:
            break
        draws = rng.random(active.size)
        rows = cumulative[previous[active]]
        chosen = np.minimum((rows <= draws[:, None]).sum(axis=1), policy.vocab_size - 1)
        chosen_logprobs = table[previous[active], chosen]
        for row_index, token, logprob in zip(active, chosen, chosen_logprobs):
            tokens[row_index].append(int(token))
            logprobs[row_index].append(float(logprob))
        previous[active] = chosen
        lengths[active] += 1
        generated[active] += 1
        if policy.end_token is not None:
            ended[active] |= chosen == policy.end_token
    trajectories = []
    for index, prompt_id in enumerate(prompt_ids):
        prefix = prefixes[index]
        truncated = (
            policy.end_token is not None and not ended[index] and lengths[index] >= max_len
        )
        trajectories.append(
            Trajectory(
                prompt_id=prompt_id,
                tokens=tuple(tokens[index]),
                sampling_logprobs=tuple(logprobs[index]),
                source_policy=policy.snapshot.step_index,
                truncated=bool(truncated),
                text=render_tokens(tokens[index]),
                prefix_length=len(prefix.tokens) if prefix else 0,
                prefix_source_policy=prefix.source_policy if prefix else None,
            )
        )
    return trajectories


def is_finished(policy: ToyPolicy, trajectory: Trajectory, max_len: int) -> bool:
    """
    Whether a response reached its end token or the length limit
    """
    if len(trajectory.tokens) >= max_len:
        return True
    return bool(trajectory.tokens) and trajectory.tokens[-1] == policy.end_token


def sample(
    policy: ToyPolicy,
    prompt_tokens: Sequence[int],
    max_len: int,
    temperature: float,
    seed: int,
    prompt_id: str = "",
    prefix: Prefix | None = None,
) -> Trajectory:
    """
    Sample one response, deterministic given ``seed``
    """
    policy.check_tokens(prompt_tokens)
    rng = np.random.default_rng(seed)
    return sample_batch(
        policy=policy,
        prompt_ids=[prompt_id],
        max_len=max_len,
        temperature=temperature,
        rng=rng,
        prefixes=[prefix],
    )[0]


def logprob(
    policy: ToyPolicy, prompt_tokens: Sequence[int], target_tokens: Sequence[int]
) -> np.ndarray:
    """
    Per-token log-probabilities of a response under the policy
    """
    return policy.logprob(prompt_tokens, target_tokens)


def grad_logprob(
    policy: ToyPolicy, prompt_tokens: Sequence[int], target_tokens: Sequence[int]
) -> np.ndarray:
    """
    Gradient of the summed response log-probability
    """
    return policy.grad_logprob(prompt_tokens, target_tokens)


def finite_diff(
    objective: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function of a parameter table
    """
    if h <= 0:
        msg = f"Finite-difference step must be positive, got {h}"
        raise ValueError(msg)
    base = np.array(params, dtype=np.float64)
    gradient = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        forward = base.copy()
        backward = base.copy()
        forward[index] += h
        backward[index] -= h
        gradient[index] = (objective(forward) - objective(backward)) / (2 * h)
    return gradient


def sgd_update(policy: ToyPolicy, gradient: np.ndarray, learning_rate: float) -> ToyPolicy:
    """
    One ascent step on the parameter table, producing the next snapshot
    """
    if learning_rate < 0:
        msg = f"learning_rate must be non-negative, got {learning_rate}"
        raise ValueError(msg)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != policy.params.shape:
        msg = f"Gradient has shape {gradient.shape}, parameters have {policy.params.shape}"
        raise ShapeMismatchError(msg)
    updated = ToyPolicy(
        vocab_size=policy.vocab_size,
        params=policy.params + learning_rate * gradient,
        snapshot=policy.snapshot.next(),
        end_token=policy.end_token,
    )
    row_sums = updated.row_sums()
    if not np.all(np.abs(row_sums - 1.0) <= ROW_SUM_TOLERANCE):
        msg = f"Softmax rows no longer normalized after step {updated.snapshot.step_index}"
        raise PolicyEvalError(msg)
    logger.debug("[proofpipe] Policy advanced to snapshot %d", updated.snapshot.step_index)
    return updated
