"""
Solve, verify and refine at test time

One run drafts a solution, reviews it once, then alternates verification
and verdict parsing. A pass re-verifies the unchanged candidate and a
fail sends it back for refinement. A run accepts after
``max_true_rounds`` consecutive passes and aborts after
``max_false_rounds`` consecutive fails or ``max_exploration_rounds``
verdicts.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import enum
import logging
import pathlib
from typing import Any, Iterable, Sequence

import numpy as np

from proofpipe.backends import CompletionBackend, CompletionRequest, CompletionResponse
from proofpipe.exceptions import (
    AllRunsExhaustedError,
    BackendError,
    ConfigValidationError,
    EmptyTraceError,
)
from proofpipe.records import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

SOLVER_PROMPT = (
    "Please solve the following olympiad problem. Show your complete reasoning and proof.\n"
    "1. Please use LaTeX format to represent the variables and formulas used in the "
    "solution process and results.\n"
    "2. If the problem asks you to find specific values, please put the final answer(s) "
    "in \\boxed{{}}.\n"
    "3. If the problem requires a proof, present a clear and rigorous argument.\n\n"
    "{problem}"
)
REFINE_TEMPLATE = (
    "### Problem\n\n{problem}\n\n### Current Solution\n\n{candidate}\n\n"
    "### Review\n\n{bug_report}\n\n"
    "Fix every issue raised in the review, fill in missing justifications, "
    "and write the complete improved solution."
)
VERIFY_TEMPLATE = (
    "### Problem\n\n{problem}\n\n### Solution\n\n{candidate}\n\n"
    "Check the solution step by step and write a bug report listing every "
    "error or gap in rigor. Write 'No issues found.' if there are none."
)
VERDICT_TEMPLATE = (
    "### Bug Report\n\n{bug_report}\n\n"
    "Answer with exactly one word: ACCEPT if the solution is correct and complete, "
    "REJECT if it is wrong, or REFINE if it needs repair."
)
NO_REVIEW = "No review yet. Re-read the solution and repair any gaps."
PASS_LABELS = frozenset({"ACCEPT"})
FAIL_LABELS = frozenset({"REJECT", "REFINE"})


class Phase(str, enum.Enum):
    """
    Where a run is in its loop
    """

    SOLVE = "solve"
    REFINE = "refine"
    VERIFY = "verify"
    VERDICT = "verdict"
    ACCEPTED = "accepted"
    ABORTED = "aborted"

    @property
    def terminal(self) -> bool:
        """
        Whether the run has ended
        """
        return self in (Phase.ACCEPTED, Phase.ABORTED)


class ActionKind(str, enum.Enum):
    """
    Categories of generated actions
    """

    INITIAL_SOLVE = "initial_solve"
    REFINEMENT = "refinement"
    VERIFICATION = "verification"
    VERDICT_PARSE = "verdict_parse"


class AbortReason(str, enum.Enum):
    """
    Why a run ended without accepting
    """

    FALSE_ROUNDS = "max_false_rounds"
    EXPLORATION_ROUNDS = "max_exploration_rounds"
    BACKEND_ERROR = "backend_error"


PHASE_ROLES = {
    Phase.SOLVE: "solver",
    Phase.REFINE: "solver",
    Phase.VERIFY: "verifier",
    Phase.VERDICT: "verdict",
}
PHASE_ACTIONS = {
    Phase.SOLVE: ActionKind.INITIAL_SOLVE,
    Phase.REFINE: ActionKind.REFINEMENT,
    Phase.VERIFY: ActionKind.VERIFICATION,
    Phase.VERDICT: ActionKind.VERDICT_PARSE,
}


@dataclasses.dataclass(frozen=True)
class TtsConfig:
    """
    Stopping rules, sampling settings and prompt templates
    """

    max_true_rounds: int = 5
    max_false_rounds: int = 10
    max_exploration_rounds: int = 30
    max_runs: int = 10
    temperature: float = 1.0
    top_p: float = 0.95
    max_tokens: int = 160000
    parallel_runs: int = 1
    solver_prompt: str = SOLVER_PROMPT
    refine_template: str = REFINE_TEMPLATE
    verify_template: str = VERIFY_TEMPLATE
    verdict_template: str = VERDICT_TEMPLATE

    def __post_init__(self) -> None:
        for name in (
            "max_true_rounds",
            "max_false_rounds",
            "max_exploration_rounds",
            "max_runs",
            "max_tokens",
            "parallel_runs",
        ):
            if getattr(self, name) < 1:
                raise ConfigValidationError(name, "must be positive")
        if not self.temperature > 0:
            raise ConfigValidationError("temperature", "must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigValidationError("top_p", "must be in (0, 1]")
        for name in ("solver_prompt", "refine_template", "verify_template", "verdict_template"):
            try:
                getattr(self, name).format(problem="", candidate="", bug_report="")
            except (KeyError, IndexError, ValueError) as e:
                raise ConfigValidationError(name, f"invalid template placeholder {e}") from e


@dataclasses.dataclass(frozen=True)
class TtsRunState:
    """
    State of one run
    """

    phase: Phase = Phase.SOLVE
    consecutive_true: int = 0
    consecutive_false: int = 0
    rounds_used: int = 0
    current_candidate: str = ""
    bug_report: str | None = None
    abort_reason: AbortReason | None = None


@dataclasses.dataclass(frozen=True)
class TtsAction:
    """
    One generation of a run; ``verdict`` is ``pass`` or ``fail`` on verdict parses
    """

    kind: ActionKind
    generated_tokens: int
    wall_time: float = 0.0
    verdict: str | None = None

    def __post_init__(self) -> None:
        if self.generated_tokens < 0:
            msg = f"generated_tokens must be non-negative, got {self.generated_tokens}"
            raise ValueError(msg)

    def to_record(self, run_index: int) -> dict[str, Any]:
        """
        Trace record
        """
        return {
            "type": "action",
            "run_index": run_index,
            "kind": self.kind.value,
            "generated_tokens": self.generated_tokens,
            "wall_time": self.wall_time,
            "verdict": self.verdict,
        }


@dataclasses.dataclass
class RunTrace:
    """
    Every action of one run and how it ended
    """

    run_index: int
    actions: list[TtsAction] = dataclasses.field(default_factory=list)
    final_state: TtsRunState = dataclasses.field(default_factory=TtsRunState)

    @property
    def accepted(self) -> bool:
        """
        Whether the run accepted a candidate
        """
        return self.final_state.phase is Phase.ACCEPTED

    @property
    def reason(self) -> str:
        """
        ``accepted`` or the abort reason
        """
        if self.accepted:
            return Phase.ACCEPTED.value
        if self.final_state.abort_reason is None:
            return "incomplete"
        return self.final_state.abort_reason.value

    def envelope(self) -> dict[str, Any]:
        """
        Run summary record
        """
        return {
            "type": "run",
            "run_index": self.run_index,
            "status": self.final_state.phase.value,
            "reason": self.reason,
            "rounds_used": self.final_state.rounds_used,
            "candidate": self.final_state.current_candidate,
        }


@dataclasses.dataclass
class TtsOutcome:
    """
    Result of a problem: the first accepted candidate and every run
    """

    accepted: bool
    candidate: str | None
    runs: list[RunTrace]

    @property
    def reasons(self) -> list[str]:
        """
        Per-run end reasons
        """
        return [run.reason for run in self.runs]


def parse_verdict(text: str) -> bool:
    """
    True for ACCEPT; REJECT, REFINE and anything unparseable are fails
    """
    label = text.strip().upper()
    return label in PASS_LABELS


def step(
    state: TtsRunState, response: CompletionResponse | BackendError, cfg: TtsConfig
) -> tuple[TtsRunState, TtsAction | None]:
    """
    Advance a run by one backend response

    A backend error aborts the run without emitting an action.
    """
    if state.phase.terminal:
        msg = f"Run already {state.phase.value}"
        raise ValueError(msg)
    if isinstance(response, BackendError):
        return (
            dataclasses.replace(
                state, phase=Phase.ABORTED, abort_reason=AbortReason.BACKEND_ERROR
            ),
            None,
        )
    kind = PHASE_ACTIONS[state.phase]
    if state.phase is Phase.SOLVE:
        next_state = dataclasses.replace(
            state, phase=Phase.REFINE, current_candidate=response.text
        )
        return next_state, _action(kind, response)
    if state.phase is Phase.REFINE:
        next_state = dataclasses.replace(
            state, phase=Phase.VERIFY, current_candidate=response.text
        )
        return next_state, _action(kind, response)
    if state.phase is Phase.VERIFY:
        next_state = dataclasses.replace(state, phase=Phase.VERDICT, bug_report=response.text)
        return next_state, _action(kind, response)
    passed = parse_verdict(response.text)
    rounds_used = state.rounds_used + 1
    if passed:
        next_state = dataclasses.replace(
            state,
            phase=Phase.VERIFY,
            consecutive_true=state.consecutive_true + 1,
            consecutive_false=0,
            rounds_used=rounds_used,
        )
    else:
        next_state = dataclasses.replace(
            state,
            phase=Phase.REFINE,
            consecutive_true=0,
            consecutive_false=state.consecutive_false + 1,
            rounds_used=rounds_used,
        )
    if next_state.consecutive_true >= cfg.max_true_rounds:
        next_state = dataclasses.replace(next_state, phase=Phase.ACCEPTED)
    elif next_state.consecutive_false >= cfg.max_false_rounds:
        next_state = dataclasses.replace(
            next_state, phase=Phase.ABORTED, abort_reason=AbortReason.FALSE_ROUNDS
        )
    elif rounds_used >= cfg.max_exploration_rounds:
        next_state = dataclasses.replace(
            next_state, phase=Phase.ABORTED, abort_reason=AbortReason.EXPLORATION_ROUNDS
        )
    return next_state, _action(kind, response, verdict="pass" if passed else "fail")


def _action(
    kind: ActionKind, response: CompletionResponse, verdict: str | None = None
) -> TtsAction:
    return TtsAction(
        kind=kind,
        generated_tokens=response.generated_tokens,
        wall_time=response.wall_time,
        verdict=verdict,
    )


def build_request(problem: str, state: TtsRunState, cfg: TtsConfig) -> CompletionRequest:
    """
    The prompt for the run's current phase
    """
    fields = {
        "problem": problem,
        "candidate": state.current_candidate,
        "bug_report": state.bug_report if state.bug_report is not None else NO_REVIEW,
    }
    templates = {
        Phase.SOLVE: cfg.solver_prompt,
        Phase.REFINE: cfg.refine_template,
        Phase.VERIFY: cfg.verify_template,
        Phase.VERDICT: cfg.verdict_template,
    }
    return CompletionRequest(
        prompt=templates[state.phase].format(**fields),
        max_tokens=cfg.max_tokens,
        temperature=cfg.temperature,
        top_p=cfg.top_p,
    )


def run_once(
    problem: str, backend: CompletionBackend, cfg: TtsConfig, run_index: int = 0
) -> RunTrace:
    """
    Drive one run to acceptance or abort
    """
    state = TtsRunState()
    trace = RunTrace(run_index=run_index, final_state=state)
    while not state.phase.terminal:
        role = PHASE_ROLES[state.phase]
        response: CompletionResponse | BackendError
        try:
            response = backend.complete(build_request(problem, state, cfg), role)
        except BackendError as e:
            logger.warning("[proofpipe] Run %d %s backend failed: %s", run_index, role, e)
            response = e
        state, action = step(state, response, cfg)
        if action is not None:
            trace.actions.append(action)
    trace.final_state = state
    if state.phase is Phase.ABORTED:
        logger.warning(
            "[proofpipe] Run %d aborted (%s) after %d rounds",
            run_index,
            trace.reason,
            state.rounds_used,
        )
    else:
        logger.info("[proofpipe] Run %d accepted after %d rounds", run_index, state.rounds_used)
    return trace


def run_problem(problem: str, backend: CompletionBackend, cfg: TtsConfig) -> TtsOutcome:
    """
    Launch up to ``max_runs`` runs and return the first accepted candidate

    Runs are serial and stop at the first acceptance unless
    ``parallel_runs`` is above one, in which case every run executes and
    the lowest accepted run index wins.

    Raises
    ------
    AllRunsExhaustedError
        When no run accepts; the outcome is attached as ``report``
    """
    runs: list[RunTrace] = []
    if cfg.parallel_runs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.parallel_runs) as pool:
            futures = [
                pool.submit(run_once, problem, backend, cfg, run_index)
                for run_index in range(cfg.max_runs)
            ]
            runs = [future.result() for future in futures]
    else:
        for run_index in range(cfg.max_runs):
            runs.append(run_once(problem, backend, cfg, run_index))
            if runs[-1].accepted:
                break
    for run in runs:
        if run.accepted:
            return TtsOutcome(
                accepted=True, candidate=run.final_state.current_candidate, runs=runs
            )
    outcome = TtsOutcome(accepted=False, candidate=None, runs=runs)
    raise AllRunsExhaustedError(outcome.reasons, report=outcome)


@dataclasses.dataclass(frozen=True)
class ActionStats:
    """
    Order statistics of generated tokens for one action kind
    """

    count: int
    median: float
    p25: float
    p75: float
    max: float

    def to_dict(self) -> dict[str, Any]:
        """
        JSON form
        """
        return dataclasses.asdict(self)


def _iter_actions(traces: Iterable[RunTrace | TtsAction]) -> Iterable[TtsAction]:
    for item in traces:
        if isinstance(item, RunTrace):
            yield from item.actions
        else:
            yield item


def trace_stats(traces: Sequence[RunTrace | TtsAction]) -> dict[ActionKind, ActionStats]:
    """
    Per action kind: count, median, quartiles and max of generated tokens

    Quantiles interpolate linearly between order statistics, so an even
    count's median is the mean of the two middle values.
    """
    lengths: dict[ActionKind, list[int]] = {}
    for action in _iter_actions(traces):
        lengths.setdefault(action.kind, []).append(action.generated_tokens)
    if not lengths:
        msg = "Cannot compute statistics for traces without actions"
        raise EmptyTraceError(msg)
    stats = {}
    for kind in ActionKind:
        if kind not in lengths:
            continue
        values = np.sort(np.asarray(lengths[kind], dtype=np.float64))
        p25, median, p75 = np.percentile(values, [25, 50, 75])
        stats[kind] = ActionStats(
            count=int(values.size),
            median=float(median),
            p25=float(p25),
            p75=float(p75),
            max=float(values[-1]),
        )
    return stats


def write_traces(path: pathlib.Path, outcome: TtsOutcome, problem_id: str = "") -> int:
    """
    Write run envelopes, their actions and the outcome as JSONL
    """
    records: list[dict[str, Any]] = []
    for run in outcome.runs:
        records.append({**run.envelope(), "problem_id": problem_id})
        records.extend(action.to_record(run.run_index) for action in run.actions)
    records.append(
        {
            "type": "outcome",
            "problem_id": problem_id,
            "accepted": outcome.accepted,
            "runs": len(outcome.runs),
            "reasons": outcome.reasons,
        }
    )
    return write_jsonl(path, records)


def read_traces(path: pathlib.Path) -> list[RunTrace]:
    """
    Rebuild run traces from a JSONL trace file

    Action records attach to the most recent run envelope with the same index.
    """
    runs: list[RunTrace] = []
    current: dict[int, RunTrace] = {}
    for record in iter_jsonl(path):
        kind = record.get("type")
        if kind == "run":
            phase = Phase(record.get("status", Phase.ABORTED.value))
            reason = record.get("reason")
            abort_reason = (
                AbortReason(reason)
                if reason in {item.value for item in AbortReason}
                else None
            )
            run = RunTrace(
                run_index=int(record["run_index"]),
                final_state=TtsRunState(
                    phase=phase,
                    rounds_used=int(record.get("rounds_used", 0)),
                    current_candidate=str(record.get("candidate", "")),
                    abort_reason=abort_reason,
                ),
            )
            current[run.run_index] = run
            runs.append(run)
        elif kind == "action":
            run_index = int(record.get("run_index", 0))
            if run_index not in current:
                current[run_index] = RunTrace(run_index=run_index)
                runs.append(current[run_index])
            current[run_index].actions.append(
                TtsAction(
                    kind=ActionKind(record["kind"]),
                    generated_tokens=int(record["generated_tokens"]),
                    wall_time=float(record.get("wall_time", 0.0)),
                    verdict=record.get("verdict"),
                )
            )
    return runs
