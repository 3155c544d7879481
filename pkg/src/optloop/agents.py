"""Agent roles, prompt assembly, and the two proposal backends.

A backend is anything with a ``propose(request) -> AgentResponse`` method.
The HTTP backend talks to a chat-completions endpoint with bounded
retries; the scripted backend replays canned replies keyed by
``(round, source, attempt)`` so every orchestration path can be exercised
deterministically and offline.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .patching import Proposal, render_proposal

log = logging.getLogger(__name__)

WORKER = "worker"
COORDINATOR = "coordinator"
ENGINEER = "engineer"
ARCHITECT = "architect"
OPTIMIZER = "optimizer"
EFFICIENCY = "efficiency"
EXPERT_ROLES = (ARCHITECT, OPTIMIZER, EFFICIENCY)

RETRY_BACKOFF_S = (1.0, 2.0, 4.0)


class ScriptExhausted(RuntimeError):
    """The reply script has no entry for a requested (round, source, attempt)."""


class BackendExhausted(RuntimeError):
    """The HTTP backend gave up: retries spent or a non-retryable response."""


@dataclass(frozen=True)
class AgentRequest:
    """Everything one proposal call needs.

    ``source`` is the telemetry label (``worker-2``, ``coordinator``, a
    team role name, ``engineer``); ``attempt`` counts how many times this
    source has been asked within the round, so scripted replies can vary
    across turns of the same role.
    """

    role: str
    round: int
    source: str
    attempt: int = 1
    code_context: str = ""
    memory_context: str = ""
    handoff_context: str = ""
    extra: str = ""


@dataclass(frozen=True)
class AgentResponse:
    raw_text: str
    latency_s: float = 0.0
    attempts: int = 1
    usage: dict = field(default_factory=dict)


class Backend(Protocol):
    def propose(self, request: AgentRequest) -> AgentResponse: ...


class PromptSet:
    """Per-role system prompts and user message templates.

    Loaded from a directory of ``system_<role>.txt`` / ``user_<kind>.txt``
    files; the packaged defaults are used for anything missing, so a config
    can override a single role without copying the rest.
    """

    _USER_KINDS = {WORKER: "user_worker", COORDINATOR: "user_coordinator", ENGINEER: "user_engineer"}

    def __init__(self, overrides_dir: str | Path | None = None):
        self._overrides = Path(overrides_dir) if overrides_dir else None

    def _load(self, stem: str) -> str:
        if self._overrides is not None:
            candidate = self._overrides / f"{stem}.txt"
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        packaged = resources.files("optloop") / "prompts" / f"{stem}.txt"
        return packaged.read_text(encoding="utf-8")

    def system_for(self, role: str) -> str:
        try:
            return self._load(f"system_{role}")
        except FileNotFoundError:
            return self._load(f"system_{WORKER}")

    def user_template_for(self, role: str) -> str:
        return self._load(self._USER_KINDS.get(role, "user_expert"))


def render_template(template: str, mapping: dict[str, str]) -> str:
    """Fill ``{name}`` placeholders by plain substring replacement.

    str.format would choke on braces inside embedded source code, so the
    placeholders are replaced literally, one by one.
    """
    out = template
    for key, value in mapping.items():
        out = out.replace("{" + key + "}", value)
    return out


def compose_user_message(request: AgentRequest, prompts: PromptSet) -> str:
    """Build the user message for a request from its role's template."""
    template = prompts.user_template_for(request.role)
    return render_template(template, {
        "code": request.code_context,
        "memory": request.memory_context,
        "handoff": request.handoff_context,
        "candidates": request.extra,
        "error_log": request.extra,
    })


class ScriptedBackend:
    """Replays canned replies from a script file.

    Script format: a header line ``[<round>.<source>.<attempt>]`` alone at
    column 0 starts a reply; everything until the next header is the reply
    text, verbatim.  Replies are keyed, not positional, so a script can
    cover more rounds than a run ends up executing.
    """

    HEADER_RE = re.compile(r"^\[(\d+)\.([A-Za-z0-9_-]+)\.(\d+)\]\s*$")

    def __init__(self, replies: dict[tuple[int, str, int], str]):
        self.replies = dict(replies)
        self.consumed: list[tuple[int, str, int]] = []
        self.requests: list[AgentRequest] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(parse_script(Path(path).read_text(encoding="utf-8")))

    def propose(self, request: AgentRequest) -> AgentResponse:
        key = (request.round, request.source, request.attempt)
        if key not in self.replies:
            raise ScriptExhausted(f"no scripted reply for round={key[0]} source={key[1]} attempt={key[2]}")
        self.consumed.append(key)
        self.requests.append(request)
        return AgentResponse(raw_text=self.replies[key], latency_s=0.0, attempts=1)


def parse_script(text: str) -> dict[tuple[int, str, int], str]:
    """Parse a reply script into its keyed sections."""
    replies: dict[tuple[int, str, int], str] = {}
    key: tuple[int, str, int] | None = None
    body: list[str] = []

    def flush() -> None:
        if key is not None:
            replies[key] = "\n".join(body)

    for line in text.split("\n"):
        match = ScriptedBackend.HEADER_RE.match(line)
        if match:
            flush()
            key = (int(match.group(1)), match.group(2), int(match.group(3)))
            body = []
        elif key is not None:
            body.append(line)
    flush()
    return replies


class HttpBackend:
    """Chat-completions client with bounded retries.

    Only transport errors and 5xx responses are retried (with fixed
    backoff); any 4xx or an unreadable success body fails immediately,
    because resending the same request cannot change those.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        models: dict[str, str] | None = None,
        default_model: str = "default",
        prompts: PromptSet | None = None,
        timeout_s: float = 60.0,
        max_retries: int = 3,
        backoff_s: Sequence[float] = RETRY_BACKOFF_S,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.models = dict(models or {})
        self.default_model = default_model
        self.prompts = prompts or PromptSet()
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = tuple(backoff_s)

    def _payload(self, request: AgentRequest) -> dict:
        return {
            "model": self.models.get(request.role, self.default_model),
            "messages": [
                {"role": "system", "content": self.prompts.system_for(request.role)},
                {"role": "user", "content": compose_user_message(request, self.prompts)},
            ],
        }

    def propose(self, request: AgentRequest) -> AgentResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = self._payload(request)
        started = time.monotonic()
        last_error = "no attempts made"
        for attempt in range(1, self.max_retries + 1):
            try:
                # one-shot requests (no shared Session) keep parallel
                # workers free of any shared connection state
                response = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=payload, headers=headers, timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.status_code >= 500:
                    last_error = f"server error {response.status_code}"
                elif response.status_code != 200:
                    raise BackendExhausted(
                        f"non-retryable status {response.status_code} for {request.source}: "
                        f"{response.text[:200]}"
                    )
                else:
                    latency = time.monotonic() - started
                    try:
                        body = response.json()
                        content = body["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise BackendExhausted(f"unreadable completion body: {exc}") from exc
                    if not isinstance(content, str):
                        raise BackendExhausted("completion content is not text")
                    return AgentResponse(
                        raw_text=content, latency_s=latency, attempts=attempt,
                        usage=body.get("usage") or {},
                    )
            if attempt < self.max_retries:
                delay = self.backoff_s[min(attempt - 1, len(self.backoff_s) - 1)]
                log.debug("retrying %s after %s (%s)", request.source, delay, last_error)
                time.sleep(delay)
        raise BackendExhausted(f"gave up after {self.max_retries} attempts: {last_error}")


def render_candidates_block(candidates: Sequence[tuple[Proposal, float]]) -> str:
    """Candidate proposals with their measured metrics, for the coordinator."""
    parts = []
    for index, (proposal, metric) in enumerate(candidates, start=1):
        parts.append(f"### Candidate {index} (val_bpb {metric:.4f})\n{render_proposal(proposal)}")
    return "\n".join(parts)


def merge_candidates(
    backend: Backend,
    candidates: Sequence[tuple[Proposal, float]],
    round_number: int,
    memory_context: str = "",
) -> AgentResponse:
    """Ask the coordinator for one proposal combining multiple candidates."""
    if len(candidates) < 2:
        raise ValueError("coordinator merging needs at least two candidates")
    request = AgentRequest(
        role=COORDINATOR, round=round_number, source=COORDINATOR,
        memory_context=memory_context, extra=render_candidates_block(candidates),
    )
    return backend.propose(request)


def debug_fix(
    backend: Backend,
    round_number: int,
    error_log: str,
    code_context: str,
    handoff_context: str = "",
    attempt: int = 1,
) -> AgentResponse:
    """Ask the engineer for a minimal repair of a failing shared worktree."""
    request = AgentRequest(
        role=ENGINEER, round=round_number, source=ENGINEER, attempt=attempt,
        code_context=code_context, handoff_context=handoff_context, extra=error_log,
    )
    return backend.propose(request)
