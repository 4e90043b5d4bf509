"""
Reverse-perplexity SFT curriculum

Examples are scored once against the initial policy and presented from
the highest to the lowest length-normalized perplexity in every epoch.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from proofpipe.exceptions import (
    ConfigValidationError,
    EmptyInputError,
    EmptyTargetError,
    UnscoredError,
)
from proofpipe.simpolicy import ToyPolicy, sgd_update

logger = logging.getLogger(__name__)

SUFFICIENT_TRUNCATION_RATE = 0.05


class PolicyInterface(Protocol):
    """
    Anything that evaluates per-token log-probabilities of a target
    """

    def logprob(
        self, prompt_tokens: Sequence[int], target_tokens: Sequence[int]
    ) -> Sequence[float]:
        """
        Natural-log probability of every target token given its prefix
        """


class CurriculumOrder(str, enum.Enum):
    """
    Presentation order of SFT examples within an epoch
    """

    DESCENDING = "descending"
    ASCENDING = "ascending"
    RANDOM = "random"


@dataclasses.dataclass(frozen=True)
class CurriculumConfig:
    """
    Curriculum ordering settings
    """

    order: str = CurriculumOrder.DESCENDING.value
    truncation_threshold: float = SUFFICIENT_TRUNCATION_RATE

    def __post_init__(self) -> None:
        valid = {member.value for member in CurriculumOrder}
        if self.order not in valid:
            raise ConfigValidationError("order", f"must be one of {', '.join(sorted(valid))}")
        if not 0 < self.truncation_threshold <= 1:
            raise ConfigValidationError("truncation_threshold", "must be in (0, 1]")


@dataclasses.dataclass(frozen=True)
class SftConfig:
    """
    SFT regime

    The optimizer fields record the full-scale recipe; the toy trainer
    only reads ``epochs`` and the schedule fields.
    """

    epochs: int = 4
    batch_size: int = 128
    learning_rate: float = 1e-5
    min_learning_rate: float = 1e-6
    warmup_fraction: float = 0.1
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    max_response_tokens: int = 8192

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigValidationError("epochs", "must be at least 1")
        if self.batch_size < 1:
            raise ConfigValidationError("batch_size", "must be at least 1")
        if self.learning_rate < 0:
            raise ConfigValidationError("learning_rate", "must be non-negative")
        if not 0 <= self.min_learning_rate <= self.learning_rate:
            raise ConfigValidationError("min_learning_rate", "must be in [0, learning_rate]")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigValidationError("warmup_fraction", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigValidationError("weight_decay", "must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigValidationError(name, "must be in [0, 1)")
        if self.max_response_tokens < 1:
            raise ConfigValidationError("max_response_tokens", "must be positive")


@dataclasses.dataclass(frozen=True)
class ScoredExample:
    """
    An SFT prompt/target pair and its perplexity under the initial policy
    """

    index: int
    prompt_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    ppl: float | None = None

    def __post_init__(self) -> None:
        if len(self.target_tokens) < 1:
            msg = f"Example {self.index} has an empty target"
            raise EmptyTargetError(msg)
        if self.ppl is not None and not self.ppl > 0:
            msg = f"Example {self.index} has non-positive perplexity {self.ppl}"
            raise ValueError(msg)

    @property
    def target_length(self) -> int:
        """
        Number of target tokens (T_i)
        """
        return len(self.target_tokens)

    def to_record(self) -> dict[str, Any]:
        """
        JSONL record
        """
        record: dict[str, Any] = {
            "index": self.index,
            "prompt_tokens": list(self.prompt_tokens),
            "target_tokens": list(self.target_tokens),
        }
        if self.ppl is not None:
            record["ppl"] = self.ppl
        return record

    @classmethod
    def from_record(cls, record: dict[str, Any]) -> ScoredExample:
        """
        Build an example from its JSONL record
        """
        ppl = record.get("ppl")
        return cls(
            index=int(record["index"]),
            prompt_tokens=tuple(int(token) for token in record.get("prompt_tokens", [])),
            target_tokens=tuple(int(token) for token in record["target_tokens"]),
            ppl=None if ppl is None else float(ppl),
        )


def mean_nll(logprobs: Sequence[float]) -> float:
    """
    Mean negative log-likelihood, summed relative to the first term
    """
    if len(logprobs) == 0:
        msg = "Cannot average an empty log-probability sequence"
        raise EmptyTargetError(msg)
    first = float(logprobs[0])
    return -(first + math.fsum(float(lp) - first for lp in logprobs) / len(logprobs))


def score_perplexity(
    policy: PolicyInterface, prompt_tokens: Sequence[int], target_tokens: Sequence[int]
) -> float:
    """
    Length-normalized perplexity ``exp(-(1/T) sum_t log pi_0(y_t | x, y_<t))``
    """
    if len(target_tokens) == 0:
        msg = "Cannot score the perplexity of an empty target"
        raise EmptyTargetError(msg)
    return math.exp(mean_nll(list(policy.logprob(prompt_tokens, target_tokens))))


def score_examples(
    policy: PolicyInterface, examples: Iterable[ScoredExample]
) -> list[ScoredExample]:
    """
    Attach perplexities to every example
    """
    return [
        dataclasses.replace(
            example,
            ppl=score_perplexity(policy, example.prompt_tokens, example.target_tokens),
        )
        for example in examples
    ]


def order_curriculum(
    examples: Sequence[ScoredExample],
    order: str | CurriculumOrder = CurriculumOrder.DESCENDING,
    rng: np.random.Generator | None = None,
) -> list[ScoredExample]:
    """
    Order scored examples for presentation

    ``descending`` sorts by non-increasing perplexity, ties by ascending
    original index. ``ascending`` reverses the perplexity key with the
    same tie rule. ``random`` is a seeded shuffle.
    """
    unscored = [example.index for example in examples if example.ppl is None]
    if unscored:
        msg = f"{len(unscored)} examples have no perplexity (first index {unscored[0]})"
        raise UnscoredError(msg)
    order = CurriculumOrder(order)
    if order is CurriculumOrder.DESCENDING:
        return sorted(examples, key=lambda ex: (-ex.ppl, ex.index))  # type: ignore[operator]
    if order is CurriculumOrder.ASCENDING:
        return sorted(examples, key=lambda ex: (ex.ppl, ex.index))
    generator = rng if rng is not None else np.random.default_rng(0)
    permutation = generator.permutation(len(examples))
    return [examples[int(position)] for position in permutation]


def truncation_rate(generations: Sequence[tuple[int, int]]) -> float:
    """
    Fraction of generations whose length reached their limit
    """
    if not generations:
        msg = "Cannot compute a truncation rate without generations"
        raise EmptyInputError(msg)
    truncated = 0
    for length, limit in generations:
        if limit <= 0:
            msg = f"Generation limits must be positive, got {limit}"
            raise ValueError(msg)
        if length >= limit:
            truncated += 1
    return truncated / len(generations)


def sft_sufficient(rate: float, threshold: float = SUFFICIENT_TRUNCATION_RATE) -> bool:
    """
    Whether a validation truncation rate signals that SFT has adapted the policy
    """
    return rate < threshold


def sft_epoch(
    policy: ToyPolicy, ordered: Sequence[ScoredExample], learning_rate: float
) -> tuple[ToyPolicy, float]:
    """
    One ordered pass of per-example cross-entropy steps

    Each example contributes its length-normalized log-likelihood gradient.
    The returned NLL averages every example's mean NLL measured just
    before its own step.

    Returns
    -------
    tuple[ToyPolicy, float]
        The updated policy and the mean negative log-likelihood of the pass
    """
    if not ordered:
        msg = "Cannot run an SFT epoch without examples"
        raise EmptyInputError(msg)
    losses = []
    for example in ordered:
        logprobs = policy.logprob(example.prompt_tokens, example.target_tokens)
        losses.append(mean_nll(logprobs))
        gradient = policy.grad_logprob(example.prompt_tokens, example.target_tokens)
        policy = sgd_update(policy, gradient / example.target_length, learning_rate)
    return policy, math.fsum(losses) / len(losses)


def scheduled_learning_rate(epoch: int, cfg: SftConfig) -> float:
    """
    Linear warmup followed by cosine decay, evaluated per epoch
    """
    warmup_epochs = math.ceil(cfg.warmup_fraction * cfg.epochs)
    if epoch < warmup_epochs:
        return cfg.learning_rate * (epoch + 1) / warmup_epochs
    decay_epochs = max(cfg.epochs - warmup_epochs, 1)
    progress = (epoch - warmup_epochs) / decay_epochs
    cosine = 0.5 * (1 + math.cos(math.pi * progress))
    return cfg.min_learning_rate + (cfg.learning_rate - cfg.min_learning_rate) * cosine


def sft_train(
    policy: ToyPolicy, ordered: Sequence[ScoredExample], cfg: SftConfig
) -> tuple[ToyPolicy, list[float]]:
    """
    Repeat the identical curriculum order for every epoch
    """
    epoch_losses = []
    for epoch in range(cfg.epochs):
        learning_rate = scheduled_learning_rate(epoch, cfg)
        policy, loss = sft_epoch(policy, ordered, learning_rate)
        logger.info(
            "[proofpipe] SFT epoch %d/%d: lr=%.3g mean NLL=%.6f",
            epoch + 1,
            cfg.epochs,
            learning_rate,
            loss,
        )
        epoch_losses.append(loss)
    return policy, epoch_losses
