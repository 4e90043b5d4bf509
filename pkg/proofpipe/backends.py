"""
Solver, verifier and reward backends
"""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import pathlib
import threading
import time
from abc import ABC, abstractmethod
from typing import Any, ClassVar, Dict, TypeVar

import httpx

from proofpipe.exceptions import (
    BackendError,
    ConfigParseError,
    ConfigValidationError,
    ScenarioExhaustedError,
    VerifierUnavailableError,
)
from proofpipe.rewards import canonicalize, extract_final_answer

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0

_C = TypeVar("_C", bound="Closeable")


@dataclasses.dataclass(frozen=True)
class CompletionRequest:
    """
    One generation request: ``{prompt, max_tokens, temperature, top_p}``
    """

    prompt: str
    max_tokens: int
    temperature: float = 1.0
    top_p: float = 0.95

    def to_payload(self) -> dict[str, Any]:
        """
        Wire body
        """
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class CompletionResponse:
    """
    Generated text with its token count and wall time in seconds
    """

    text: str
    generated_tokens: int
    wall_time: float = 0.0

    @classmethod
    def from_payload(cls, payload: Any, wall_time: float = 0.0) -> CompletionResponse:
        """
        Parse a ``{text}`` response body

        ``generated_tokens`` falls back to the whitespace token count and
        a scripted ``wall_time`` takes precedence over the measured one.
        """
        if isinstance(payload, str):
            payload = {"text": payload}
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            msg = f"Completion response has no text: {payload!r}"
            raise BackendError(msg)
        text = payload["text"]
        generated = payload.get("generated_tokens", len(text.split()))
        return cls(
            text=text,
            generated_tokens=int(generated),
            wall_time=float(payload.get("wall_time", wall_time)),
        )


@dataclasses.dataclass
class MockScenario:
    """
    Scripted responses keyed by backend role and call index

    A role listed in ``cycle`` repeats its responses forever. Call indices
    listed in ``failures`` raise :class:`BackendError` instead of answering.
    Running out of responses raises :class:`ScenarioExhaustedError`.
    """

    responses: Dict[str, list] = dataclasses.field(default_factory=dict)
    cycle: set = dataclasses.field(default_factory=set)
    failures: Dict[str, set] = dataclasses.field(default_factory=dict)
    calls: collections.Counter = dataclasses.field(default_factory=collections.Counter)
    lock: threading.Lock = dataclasses.field(default_factory=threading.Lock, repr=False)

    def next(self, role: str) -> Any:
        """
        The scripted payload for the next call of ``role``
        """
        with self.lock:
            index = self.calls[role]
            self.calls[role] += 1
        if index in self.failures.get(role, set()):
            msg = f"Injected failure on {role} call {index}"
            raise BackendError(msg)
        scripted = self.responses.get(role, [])
        if role in self.cycle and scripted:
            return scripted[index % len(scripted)]
        if index >= len(scripted):
            msg = f"Scenario has no {role} response for call {index} ({len(scripted)} scripted)"
            raise ScenarioExhaustedError(msg)
        return scripted[index]

    def call_count(self, role: str) -> int:
        """
        Calls made so far for ``role``
        """
        return self.calls[role]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MockScenario:
        """
        Build a scenario from its JSON form

        Every key except ``failures`` is a role whose value is either a list
        of responses or ``{"responses": [...], "cycle": true}``.
        """
        if not isinstance(data, dict):
            msg = "Scenario must be a JSON object"
            raise ConfigParseError(msg)
        responses: dict[str, list] = {}
        cycle: set[str] = set()
        for role, value in data.items():
            if role == "failures":
                continue
            if isinstance(value, dict):
                if value.get("cycle", False):
                    cycle.add(role)
                value = value.get("responses", [])
            if not isinstance(value, list):
                msg = f"Scenario role {role!r} must be a list of responses"
                raise ConfigParseError(msg)
            responses[role] = value
        failures = {
            str(role): {int(index) for index in indices}
            for role, indices in data.get("failures", {}).items()
        }
        return cls(responses=responses, cycle=cycle, failures=failures)

    @classmethod
    def load(cls, path: pathlib.Path) -> MockScenario:
        """
        Read a scenario JSON file
        """
        try:
            data = json.loads(pathlib.Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            msg = f"{path}: invalid scenario JSON ({e.msg})"
            raise ConfigParseError(msg) from e
        except OSError as e:
            msg = f"Could not read scenario {path}: {e}"
            raise ConfigParseError(msg) from e
        return cls.from_dict(data)


class Closeable:
    """
    Context manager support for clients holding connections
    """

    def close(self) -> None:
        """
        Release held connections; a no-op unless overridden
        """

    def __enter__(self: _C) -> _C:
        return self

    def __exit__(self, *args: object) -> None:
        self.close()


class CompletionBackend(Closeable, ABC):
    """
    Base class for text generation backends
    """

    @abstractmethod
    def complete(self, request: CompletionRequest, role: str) -> CompletionResponse:
        """
        Generate a completion for ``role`` (solver, verifier or verdict)
        """


class MockCompletionBackend(CompletionBackend):
    """
    Completion backend answering from a :class:`MockScenario`
    """

    def __init__(self, scenario: MockScenario) -> None:
        self.scenario = scenario

    def complete(self, request: CompletionRequest, role: str) -> CompletionResponse:
        """
        Next scripted response for ``role``
        """
        return CompletionResponse.from_payload(self.scenario.next(role))

    @classmethod
    def from_file(cls, path: pathlib.Path) -> MockCompletionBackend:
        """
        Load the scenario file at ``path``
        """
        return cls(MockScenario.load(path))


class HttpCompletionBackend(CompletionBackend):
    """
    Completion backend speaking ``{prompt, max_tokens, temperature, top_p} -> {text}``
    """

    def __init__(
        self, url: str, timeout: float = DEFAULT_TIMEOUT, client: httpx.Client | None = None
    ) -> None:
        self.url = url
        self.client = client if client is not None else httpx.Client(timeout=timeout)

    def close(self) -> None:
        """
        Close the HTTP client
        """
        self.client.close()

    def complete(self, request: CompletionRequest, role: str) -> CompletionResponse:
        """
        POST the request and parse the response body
        """
        start = time.perf_counter()
        try:
            response = self.client.post(
                self.url, json=request.to_payload(), headers={"X-Proofpipe-Role": role}
            )
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, ValueError) as e:
            msg = f"{role} request to {self.url} failed: {e}"
            raise BackendError(msg) from e
        logger.debug("[proofpipe] %s completion from %s", role, self.url)
        return CompletionResponse.from_payload(payload, wall_time=time.perf_counter() - start)


class GenerativeVerifierClient(Closeable, ABC):
    """
    Binary judge of a whole solution: ``{problem, solution} -> {score}``
    """

    @abstractmethod
    def score(self, problem: str, solution: str) -> int:
        """
        1 when the solution is judged valid, else 0
        """


class ScriptedVerifier(GenerativeVerifierClient):
    """
    Verifier answering from the ``reward`` role of a :class:`MockScenario`
    """

    role: ClassVar[str] = "reward"

    def __init__(self, scenario: MockScenario) -> None:
        self.scenario = scenario

    @property
    def calls(self) -> int:
        """
        Number of judgments requested
        """
        return self.scenario.call_count(self.role)

    def score(self, problem: str, solution: str) -> int:
        """
        Next scripted score
        """
        try:
            payload = self.scenario.next(self.role)
        except BackendError as e:
            msg = f"Scripted verifier failed: {e}"
            raise VerifierUnavailableError(msg) from e
        value = payload.get("score") if isinstance(payload, dict) else payload
        if value not in (0, 1):
            msg = f"Scripted verifier returned {payload!r}, expected a score of 0 or 1"
            raise VerifierUnavailableError(msg)
        return int(value)


class HttpGenerativeVerifier(GenerativeVerifierClient):
    """
    Verifier behind an HTTP endpoint
    """

    def __init__(
        self, url: str, timeout: float = DEFAULT_TIMEOUT, client: httpx.Client | None = None
    ) -> None:
        self.url = url
        self.client = client if client is not None else httpx.Client(timeout=timeout)

    def close(self) -> None:
        """
        Close the HTTP client
        """
        self.client.close()

    def score(self, problem: str, solution: str) -> int:
        """
        POST ``{problem, solution}`` and read ``score``
        """
        try:
            response = self.client.post(
                self.url, json={"problem": problem, "solution": solution}
            )
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, ValueError) as e:
            msg = f"Verifier request to {self.url} failed: {e}"
            raise VerifierUnavailableError(msg) from e
        if not isinstance(payload, dict) or payload.get("score") not in (0, 1):
            msg = f"Verifier at {self.url} returned an invalid body: {payload!r}"
            raise VerifierUnavailableError(msg)
        return int(payload["score"])


class UnavailableVerifier(GenerativeVerifierClient):
    """
    Stand-in when no verifier is configured; every judgment fails
    """

    def score(self, problem: str, solution: str) -> int:
        """
        Always raise :class:`VerifierUnavailableError`
        """
        msg = "No generative verifier configured"
        raise VerifierUnavailableError(msg)


class ToyProofJudge(GenerativeVerifierClient):
    """
    Deterministic judge for toy solutions: the boxed answer must equal the reference
    """

    def __init__(self, reference: str) -> None:
        self.reference = canonicalize(reference)
        self.calls = 0

    def score(self, problem: str, solution: str) -> int:
        """
        1 iff the last boxed answer canonicalizes to the reference
        """
        self.calls += 1
        answer = extract_final_answer(solution)
        return int(answer is not None and canonicalize(answer) == self.reference)


BACKEND_SCHEMES = ("mock", "http", "https")


def _split_spec(spec: str) -> tuple[str, str]:
    scheme, separator, location = spec.partition(":")
    if not separator or not location or scheme not in BACKEND_SCHEMES:
        msg = f"Invalid backend: {spec} - must start with one of {', '.join(BACKEND_SCHEMES)}"
        raise ConfigValidationError("backend", msg)
    return scheme, location


def backend_from_spec(spec: str) -> CompletionBackend:
    """
    Build a completion backend from ``mock:<scenario.json>`` or ``http:<url>``
    """
    scheme, location = _split_spec(spec)
    if scheme == "mock":
        return MockCompletionBackend.from_file(pathlib.Path(location))
    return HttpCompletionBackend(url=f"{scheme}:{location}")


def verifier_from_spec(spec: str) -> GenerativeVerifierClient:
    """
    Build a generative verifier from ``mock:<scenario.json>`` or ``http:<url>``

    A mock verifier reads the ``reward`` role of the scenario.
    """
    scheme, location = _split_spec(spec)
    if scheme == "mock":
        return ScriptedVerifier(MockScenario.load(pathlib.Path(location)))
    return HttpGenerativeVerifier(url=f"{scheme}:{location}")
