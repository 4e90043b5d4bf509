"""
proofpipe exceptions
"""

from __future__ import annotations

from typing import Sequence


class ProofPipeError(Exception):
    """
    Base exception for proofpipe
    """


class InvalidPromptError(ProofPipeError, ValueError):
    """
    A prompt violates its invariants
    """


class DuplicatePromptError(ProofPipeError, ValueError):
    """
    Two prompts in one pool share an id
    """


class MixedPromptError(ProofPipeError, ValueError):
    """
    Trajectories from different prompts were grouped together
    """


class UnscoredError(ProofPipeError, ValueError):
    """
    A reward or perplexity was required but has not been computed
    """


class EmptyTargetError(ProofPipeError, ValueError):
    """
    A target token sequence is empty
    """


class EmptyInputError(ProofPipeError, ValueError):
    """
    An operation received no input to aggregate
    """


class EmptySequenceError(ProofPipeError, ValueError):
    """
    A log-probability sequence is empty
    """


class LengthMismatchError(ProofPipeError, ValueError):
    """
    Two aligned sequences have different lengths
    """


class AlignmentError(ProofPipeError, ValueError):
    """
    Ratios or advantages are not aligned with group members
    """


class MissingSourceLogprobError(ProofPipeError, ValueError):
    """
    A replayed trajectory lacks its source-policy log-probabilities
    """


class PolicyEvalError(ProofPipeError, RuntimeError):
    """
    A policy could not evaluate the requested quantity
    """


class VocabMismatchError(PolicyEvalError, ValueError):
    """
    A token id falls outside the policy vocabulary
    """


class ShapeMismatchError(ProofPipeError, ValueError):
    """
    A parameter update does not match the parameter table shape
    """


class NotInBufferError(ProofPipeError, KeyError):
    """
    A prompt is not present in the replay buffer
    """


class EmptyFreshQueueError(ProofPipeError, LookupError):
    """
    A batch was requested but the fresh prompt queue is empty
    """


class BackendError(ProofPipeError, RuntimeError):
    """
    A solver, verifier or verdict backend failed
    """


class ScenarioExhaustedError(BackendError):
    """
    A scripted mock backend ran out of responses
    """


class VerifierUnavailableError(BackendError):
    """
    The generative verifier was required but could not answer
    """


class AllRunsExhaustedError(ProofPipeError, RuntimeError):
    """
    Every test-time-scaling run ended without an accepted candidate
    """

    def __init__(self, reasons: Sequence[str], report: object = None) -> None:
        self.reasons = list(reasons)
        self.report = report
        msg = f"All {len(self.reasons)} runs ended without an accepted candidate: " + ", ".join(
            self.reasons
        )
        super().__init__(msg)


class EmptyTraceError(ProofPipeError, ValueError):
    """
    Trace statistics were requested for traces without actions
    """


class ConfigParseError(ProofPipeError, ValueError):
    """
    A configuration file could not be parsed
    """


class ConfigValidationError(ProofPipeError, ValueError):
    """
    A configuration value violates its invariants

    The offending key is available on ``.key``.
    """

    def __init__(self, key: str, reason: str) -> None:
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")

    def with_prefix(self, prefix: str) -> ConfigValidationError:
        """
        Qualify the key with its config table
        """
        return ConfigValidationError(key=f"{prefix}.{self.key}", reason=self.reason)


class ReportIOError(ProofPipeError, OSError):
    """
    A report or trace file could not be written
    """
