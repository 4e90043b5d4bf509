"""
Layered reward verification

Responses go through anti-hack sanitization, canonicalized answer
matching, a rule-based arithmetic equivalence check and finally a
generative verifier. The first layer that decides a response wins.
"""

from __future__ import annotations

import dataclasses
import enum
import fractions
import functools
import logging
import math
import re
from typing import TYPE_CHECKING, Any, Callable, Sequence

import numpy as np
import sympy

from proofpipe.core import Prompt
from proofpipe.exceptions import BackendError, ConfigValidationError, VerifierUnavailableError

if TYPE_CHECKING:
    from proofpipe.backends import GenerativeVerifierClient

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE_TOKENS = ("<|im_start|>", "<|im_end|>", "<|endoftext|>")
DEFAULT_FALLBACK_TEXT = "No valid solution was produced."
MAX_EXPONENT = 1000
MAX_POWER_DIGITS = 10_000


class VerdictValue(str, enum.Enum):
    """
    Binary judgment of a response
    """

    CORRECT = "correct"
    INCORRECT = "incorrect"


class VerdictStage(str, enum.Enum):
    """
    The layer that resolved a response
    """

    EXACT_MATCH = "exact_match"
    EXPRESSION_RULE = "expression_rule"
    GENERATIVE = "generative"
    ANTI_HACK_FALLBACK = "anti_hack_fallback"


class Equivalence(str, enum.Enum):
    """
    Outcome of the arithmetic equivalence rule
    """

    EQUAL = "equal"
    UNEQUAL = "unequal"
    UNDECIDED = "undecided"


class SanitizeReason(str, enum.Enum):
    """
    Why a response was replaced by the fallback
    """

    LEAKED_TEMPLATE_TOKEN = "leaked_template_token"
    UNBALANCED_THINK_DELIMITERS = "unbalanced_think_delimiters"
    SEVERE_REPETITION = "severe_repetition"


class RewardMode(str, enum.Enum):
    """
    ``answer`` runs every layer; ``proof`` sends everything to the generative verifier
    """

    ANSWER = "answer"
    PROOF = "proof"


@dataclasses.dataclass(frozen=True)
class Verdict:
    """
    Final judgment with the stage that produced it
    """

    value: VerdictValue
    stage: VerdictStage

    @property
    def reward(self) -> float:
        """
        1.0 for correct, 0.0 for incorrect
        """
        return 1.0 if self.value is VerdictValue.CORRECT else 0.0

    def to_dict(self) -> dict[str, Any]:
        """
        JSON form
        """
        return {"value": self.value.value, "stage": self.stage.value, "reward": int(self.reward)}


@dataclasses.dataclass(frozen=True)
class SanitizeReport:
    """
    Anti-hack result; ``output_text`` is the fallback when not clean
    """

    clean: bool
    reasons: tuple[SanitizeReason, ...]
    output_text: str


@dataclasses.dataclass(frozen=True)
class RewardChainConfig:
    """
    Reward chain settings
    """

    mode: str = RewardMode.ANSWER.value
    template_tokens: tuple[str, ...] = DEFAULT_TEMPLATE_TOKENS
    think_open: str = "<think>"
    think_close: str = "</think>"
    repeat_window: int = 32
    repeat_threshold: int = 10
    max_repeat_period: int = 2048
    fallback_text: str = DEFAULT_FALLBACK_TEXT
    relative_tolerance: float = 1e-9

    def __post_init__(self) -> None:
        if self.mode not in {mode.value for mode in RewardMode}:
            raise ConfigValidationError("mode", "must be 'answer' or 'proof'")
        if not self.template_tokens or not all(self.template_tokens):
            raise ConfigValidationError("template_tokens", "must be a non-empty list of strings")
        if not self.think_open or not self.think_close:
            raise ConfigValidationError("think_open", "thinking delimiters must be non-empty")
        if self.repeat_window < 1:
            raise ConfigValidationError("repeat_window", "must be positive")
        if self.repeat_threshold < 2:
            raise ConfigValidationError("repeat_threshold", "must be at least 2")
        if self.max_repeat_period < self.repeat_window:
            raise ConfigValidationError("max_repeat_period", "must be at least repeat_window")
        if not 0 < self.relative_tolerance < 1:
            raise ConfigValidationError("relative_tolerance", "must be in (0, 1)")
        if "\\boxed" in self.fallback_text:
            raise ConfigValidationError("fallback_text", "must not contain a boxed answer")
        if _sanitize_reasons(self.fallback_text, self):
            raise ConfigValidationError("fallback_text", "must pass the anti-hack checks")


def extract_final_answer(response: str) -> str | None:
    """
    Content of the last ``\\boxed{...}`` group, nested braces respected

    Returns None when there is no box or the last box never closes.
    """
    for match in reversed(list(re.finditer(r"\\boxed", response))):
        position = match.end()
        while position < len(response) and response[position].isspace():
            position += 1
        if position >= len(response) or response[position] != "{":
            continue
        depth = 0
        for index in range(position, len(response)):
            char = response[index]
            if char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    return response[position + 1 : index]
        return None
    return None


_WHITESPACE = re.compile(r"\s+")
_LEFT_RIGHT = re.compile(r"\s*\\(?:left|right)(?![A-Za-z])\s*")
_OPEN_SPACE = re.compile(r"([(\[{])\s+")
_CLOSE_SPACE = re.compile(r"\s+([)\]}])")
_CONSTANT = re.compile(r"(?<![A-Za-z\\])(pi|e)(?![A-Za-z])", re.IGNORECASE)


def _drop_wrapper(match: re.Match[str]) -> str:
    wrapper = match.group(0)
    return " " if wrapper[0].isspace() or wrapper[-1].isspace() else ""


def _canonicalize_once(answer: str) -> str:
    text = answer.replace("−", "-")
    text = _WHITESPACE.sub(" ", text).strip()
    while len(text) >= 2 and text.startswith("$") and text.endswith("$"):
        text = text[1:-1].strip()
    text = _LEFT_RIGHT.sub(_drop_wrapper, text)
    text = _OPEN_SPACE.sub(r"\1", text)
    text = _CLOSE_SPACE.sub(r"\1", text)
    text = _CONSTANT.sub(lambda m: m.group(1).lower(), text)
    return _WHITESPACE.sub(" ", text).strip()


def canonicalize(answer: str) -> str:
    """
    Idempotent normalization of a final answer

    Trims and collapses whitespace, strips outer ``$...$`` and
    ``\\left``/``\\right`` wrappers, maps the unicode minus to ``-`` and
    lowercases standalone ``pi`` and ``e``.
    """
    text = answer
    while True:
        updated = _canonicalize_once(text)
        if updated == text:
            return text
        text = updated


class _ExpressionSyntaxError(ValueError):
    pass


_TOKEN = re.compile(
    r"\s*(?:(?P<number>\d+(?:\.\d+)?|\.\d+)"
    r"|(?P<command>\\[A-Za-z]+)"
    r"|(?P<name>[A-Za-z]+)"
    r"|(?P<symbol>[-+*/^(){}\[\]]))"
)
_MULTIPLY = {"*", "\\times", "\\cdot"}
_DIVIDE = {"/", "\\div"}
_FRACTIONS = {"\\frac", "\\dfrac", "\\tfrac"}
_CONSTANTS = {"pi": sympy.pi, "\\pi": sympy.pi, "e": sympy.E}


def _tokenize(text: str) -> list[str]:
    tokens = []
    position = 0
    text = text.strip()
    while position < len(text):
        match = _TOKEN.match(text, position)
        if match is None or match.end() == position:
            msg = f"Unexpected character {text[position]!r}"
            raise _ExpressionSyntaxError(msg)
        tokens.append(match.group(match.lastgroup).strip())  # type: ignore[arg-type]
        position = match.end()
        while position < len(text) and text[position].isspace():
            position += 1
    return tokens


class _ExpressionParser:
    """
    Recursive-descent parser for arithmetic over rationals, roots, pi and e
    """

    def __init__(self, text: str) -> None:
        self.tokens = _tokenize(text)
        self.position = 0

    def peek(self) -> str | None:
        if self.position < len(self.tokens):
            return self.tokens[self.position]
        return None

    def advance(self) -> str:
        token = self.peek()
        if token is None:
            msg = "Unexpected end of expression"
            raise _ExpressionSyntaxError(msg)
        self.position += 1
        return token

    def expect(self, token: str) -> None:
        found = self.advance()
        if found != token:
            msg = f"Expected {token!r}, found {found!r}"
            raise _ExpressionSyntaxError(msg)

    def parse(self) -> sympy.Expr:
        if not self.tokens:
            msg = "Empty expression"
            raise _ExpressionSyntaxError(msg)
        value = self.expression()
        if self.peek() is not None:
            msg = f"Trailing token {self.peek()!r}"
            raise _ExpressionSyntaxError(msg)
        return value

    def expression(self) -> sympy.Expr:
        value = self.term()
        while self.peek() in ("+", "-"):
            if self.advance() == "+":
                value = value + self.term()
            else:
                value = value - self.term()
        return value

    def term(self) -> sympy.Expr:
        value = self.unary()
        while True:
            token = self.peek()
            if token in _MULTIPLY:
                self.advance()
                value = value * self.unary()
            elif token in _DIVIDE:
                self.advance()
                value = value / self.unary()
            elif token is not None and self.starts_implicit_factor(token):
                value = value * self.power()
            else:
                return value

    def starts_implicit_factor(self, token: str) -> bool:
        return token in ("(", "\\sqrt", "\\pi", "pi", "e") or token in _FRACTIONS

    def unary(self) -> sympy.Expr:
        token = self.peek()
        if token == "-":
            self.advance()
            return -self.unary()
        if token == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> sympy.Expr:
        base = self.atom()
        if self.peek() != "^":
            return base
        self.advance()
        exponent = self.group() if self.peek() == "{" else self.unary()
        if exponent.is_Rational and abs(exponent) > MAX_EXPONENT:
            msg = f"Exponent {exponent} is too large"
            raise _ExpressionSyntaxError(msg)
        if _power_digits(base, exponent) > MAX_POWER_DIGITS:
            msg = f"Power with exponent {exponent} exceeds {MAX_POWER_DIGITS} digits"
            raise _ExpressionSyntaxError(msg)
        return sympy.Pow(base, exponent)

    def group(self) -> sympy.Expr:
        self.expect("{")
        value = self.expression()
        self.expect("}")
        return value

    def atom(self) -> sympy.Expr:
        token = self.advance()
        if token[0].isdigit() or token[0] == ".":
            value = fractions.Fraction(token)
            return sympy.Rational(value.numerator, value.denominator)
        if token == "(":
            value = self.expression()
            self.expect(")")
            return value
        if token == "{":
            value = self.expression()
            self.expect("}")
            return value
        if token in _FRACTIONS:
            numerator = self.group()
            denominator = self.group()
            return numerator / denominator
        if token == "\\sqrt":
            index: sympy.Expr = sympy.Integer(2)
            if self.peek() == "[":
                self.advance()
                index = self.expression()
                self.expect("]")
            radicand = self.group() if self.peek() == "{" else self.atom()
            return sympy.root(radicand, index)
        if token in _CONSTANTS:
            return _CONSTANTS[token]
        msg = f"Unsupported token {token!r}"
        raise _ExpressionSyntaxError(msg)


def _power_digits(base: sympy.Expr, exponent: sympy.Expr) -> float:
    """
    Approximate decimal digits of the rational part of a power

    Zero when the exponent is irrational; sympy keeps those powers symbolic.
    """
    if not exponent.is_Rational:
        return 0.0
    coefficient, _ = base.as_coeff_Mul()
    if not coefficient.is_Rational:
        return 0.0
    bits = max(abs(int(coefficient.p)).bit_length(), int(coefficient.q).bit_length())
    return bits * math.log10(2) * abs(float(exponent))


@functools.lru_cache(maxsize=4096)
def _evaluate(text: str) -> sympy.Expr | None:
    try:
        value = _ExpressionParser(text).parse()
    except (_ExpressionSyntaxError, ValueError, TypeError, ZeroDivisionError):
        return None
    if value.has(sympy.zoo, sympy.nan, sympy.oo, -sympy.oo) or value.free_symbols:
        return None
    return value


def expression_equivalent(a: str, b: str, relative_tolerance: float = 1e-9) -> Equivalence:
    """
    Compare two answers inside a small arithmetic grammar

    Rational values must match exactly; other real values within
    ``relative_tolerance``. Anything outside the grammar, non-real or
    non-finite is undecided.
    """
    left = _evaluate(canonicalize(a))
    right = _evaluate(canonicalize(b))
    if left is None or right is None:
        return Equivalence.UNDECIDED
    if left.is_Rational and right.is_Rational:
        return Equivalence.EQUAL if left == right else Equivalence.UNEQUAL
    left_value = sympy.N(left, 30)
    right_value = sympy.N(right, 30)
    if not (left_value.is_real and right_value.is_real):
        return Equivalence.UNDECIDED
    left_float = float(left_value)
    right_float = float(right_value)
    if not (np.isfinite(left_float) and np.isfinite(right_float)):
        return Equivalence.UNDECIDED
    scale = max(abs(left_float), abs(right_float))
    if abs(left_float - right_float) <= relative_tolerance * scale:
        return Equivalence.EQUAL
    return Equivalence.UNEQUAL


def _longest_true_run(mask: np.ndarray) -> int:
    if not mask.any():
        return 0
    padded = np.concatenate(([0], mask.astype(np.int8), [0]))
    changes = np.diff(padded)
    starts = np.flatnonzero(changes == 1)
    ends = np.flatnonzero(changes == -1)
    return int((ends - starts).max())


def has_severe_repetition(text: str, threshold: int, min_period: int, max_period: int) -> bool:
    """
    Whether a block of at least ``min_period`` characters repeats ``threshold`` times in a row
    """
    if len(text) < threshold * min_period:
        return False
    codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    upper = min(max_period, len(codes) // threshold)
    for period in range(min_period, upper + 1):
        run = _longest_true_run(codes[:-period] == codes[period:])
        if 1 + run // period >= threshold:
            return True
    return False


def _sanitize_reasons(response: str, cfg: RewardChainConfig) -> list[SanitizeReason]:
    reasons = []
    if any(token in response for token in cfg.template_tokens):
        reasons.append(SanitizeReason.LEAKED_TEMPLATE_TOKEN)
    if response.count(cfg.think_open) != response.count(cfg.think_close):
        reasons.append(SanitizeReason.UNBALANCED_THINK_DELIMITERS)
    if has_severe_repetition(
        response, cfg.repeat_threshold, cfg.repeat_window, cfg.max_repeat_period
    ):
        reasons.append(SanitizeReason.SEVERE_REPETITION)
    return reasons


def anti_hack(
    response: str,
    template_tokens: Sequence[str] | None = None,
    repeat_threshold: int | None = None,
    cfg: RewardChainConfig | None = None,
) -> SanitizeReport:
    """
    Replace malformed responses with the safe fallback answer

    ``template_tokens`` and ``repeat_threshold`` override the matching
    ``cfg`` fields.
    """
    base = cfg if cfg is not None else RewardChainConfig()
    overrides: dict[str, Any] = {}
    if template_tokens is not None:
        overrides["template_tokens"] = tuple(template_tokens)
    if repeat_threshold is not None:
        overrides["repeat_threshold"] = repeat_threshold
    effective = dataclasses.replace(base, **overrides) if overrides else base
    reasons = _sanitize_reasons(response, effective)
    if not reasons:
        return SanitizeReport(clean=True, reasons=(), output_text=response)
    return SanitizeReport(
        clean=False, reasons=tuple(reasons), output_text=effective.fallback_text
    )


def _generative_verdict(
    verifier: GenerativeVerifierClient, problem: str, solution: str
) -> Verdict:
    try:
        score = verifier.score(problem=problem, solution=solution)
    except BackendError as e:
        logger.error("[proofpipe] Generative verifier failed: %s", e)
        if isinstance(e, VerifierUnavailableError):
            raise
        msg = f"Generative verifier failed: {e}"
        raise VerifierUnavailableError(msg) from e
    if score not in (0, 1):
        msg = f"Generative verifier returned score {score!r}, expected 0 or 1"
        logger.error("[proofpipe] %s", msg)
        raise VerifierUnavailableError(msg)
    value = VerdictValue.CORRECT if score == 1 else VerdictValue.INCORRECT
    return Verdict(value=value, stage=VerdictStage.GENERATIVE)


def score_rollout(
    cfg: RewardChainConfig,
    prompt: Prompt,
    response: str,
    verifier: GenerativeVerifierClient,
) -> Verdict:
    """
    Run the reward chain on one response

    Verifiable prompts in ``answer`` mode try exact match, then the
    expression rule, then the generative verifier. A response without a
    final answer is incorrect at the exact-match stage. Every other
    prompt goes straight from anti-hack to the generative verifier.

    Raises
    ------
    VerifierUnavailableError
        When the generative layer is needed and the verifier fails
    """
    report = anti_hack(response, cfg=cfg)
    if not report.clean:
        return Verdict(value=VerdictValue.INCORRECT, stage=VerdictStage.ANTI_HACK_FALLBACK)
    if cfg.mode == RewardMode.PROOF.value or prompt.reference_answer is None:
        return _generative_verdict(verifier, prompt.text, report.output_text)
    answer = extract_final_answer(report.output_text)
    if answer is None:
        return Verdict(value=VerdictValue.INCORRECT, stage=VerdictStage.EXACT_MATCH)
    if canonicalize(answer) == canonicalize(prompt.reference_answer):
        return Verdict(value=VerdictValue.CORRECT, stage=VerdictStage.EXACT_MATCH)
    equivalence = expression_equivalent(answer, prompt.reference_answer, cfg.relative_tolerance)
    if equivalence is Equivalence.EQUAL:
        return Verdict(value=VerdictValue.CORRECT, stage=VerdictStage.EXPRESSION_RULE)
    if equivalence is Equivalence.UNEQUAL:
        return Verdict(value=VerdictValue.INCORRECT, stage=VerdictStage.EXPRESSION_RULE)
    return _generative_verdict(verifier, prompt.text, report.output_text)


def cached_scorer(
    cfg: RewardChainConfig, verifier: GenerativeVerifierClient
) -> Callable[[Prompt, str], Verdict]:
    """
    A scorer that judges each distinct response once per reference answer

    Prompts without a reference, and every prompt in ``proof`` mode, are
    keyed by their text as well since the verifier reads the problem.
    """
    cache: dict[tuple[str | None, str, str], Verdict] = {}

    def score(prompt: Prompt, response: str) -> Verdict:
        problem_key = (
            prompt.text
            if prompt.reference_answer is None or cfg.mode == RewardMode.PROOF.value
            else ""
        )
        key = (prompt.reference_answer, problem_key, response)
        verdict = cache.get(key)
        if verdict is None:
            verdict = score_rollout(cfg, prompt, response, verifier)
            cache[key] = verdict
        return verdict

    return score
