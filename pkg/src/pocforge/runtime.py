"""Agent session runtime: the model-turn/tool-execution loop and trajectory records.

A session is strictly sequential: one model turn, then any requested tool
executions, then the next turn, until the backend emits a final message or
the turn budget runs out. Every step is appended to a persisted trajectory
before the loop moves on.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Union

from .backends import BackendRef, BackendTurn, make_backend
from .toolkit import ToolContext, ToolOutput, ToolRegistry, default_registry

ROLES = ("analyzer", "generator", "checker", "extractor", "filter")

# Tools that hand control to a human; never allowed in autonomous sessions.
INTERACTIVE_TOOLS = frozenset({"ask_user", "ask_user_question", "user_input", "request_user"})

DENIED_EXIT_CODE = 127
DIGEST_LIMIT = 120


class SessionClosed(Exception):
    """continue was requested but the current phase never reached a final message."""


class IndexOutOfRange(Exception):
    def __init__(self, index: int, length: int):
        super().__init__(f"step index {index} out of range for trajectory of length {length}")


# ---------------------------------------------------------------------------
# Trajectory steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Thinking:
    text: str


@dataclass(frozen=True)
class ToolCall:
    tool: str
    args: dict


@dataclass(frozen=True)
class ToolResult:
    output: str
    exit_code: int
    truncated: bool


@dataclass(frozen=True)
class PhasePrompt:
    text: str


@dataclass(frozen=True)
class FinalMessage:
    text: str


StepBody = Union[Thinking, ToolCall, ToolResult, PhasePrompt, FinalMessage]

_KIND_BY_TYPE = {
    Thinking: "thinking",
    ToolCall: "tool_call",
    ToolResult: "tool_result",
    PhasePrompt: "phase_prompt",
    FinalMessage: "final_message",
}


@dataclass(frozen=True)
class Step:
    index: int
    kind: str
    body: StepBody
    at: str

    def to_dict(self) -> dict:
        record = {"index": self.index, "kind": self.kind, "at": self.at}
        record.update(vars(self.body))
        return record


def _body_from_dict(kind: str, record: dict) -> StepBody:
    if kind == "thinking":
        return Thinking(text=record["text"])
    if kind == "tool_call":
        return ToolCall(tool=record["tool"], args=dict(record.get("args", {})))
    if kind == "tool_result":
        return ToolResult(
            output=record["output"],
            exit_code=record["exit_code"],
            truncated=record.get("truncated", False),
        )
    if kind == "phase_prompt":
        return PhasePrompt(text=record["text"])
    if kind == "final_message":
        return FinalMessage(text=record["text"])
    raise ValueError(f"unknown step kind {kind!r}")


class Trajectory:
    """Append-only ordered record of one agent session."""

    def __init__(self, session_id: str, role: str, persist_path: Path | None = None):
        self.session_id = session_id
        self.role = role
        self.steps: list[Step] = []
        self.incomplete = False
        self.persist_path = Path(persist_path) if persist_path else None
        if self.persist_path:
            self.persist_path.parent.mkdir(parents=True, exist_ok=True)
            self.persist_path.write_text("")

    def append(self, body: StepBody) -> Step:
        from .model import utc_now

        step = Step(index=len(self.steps), kind=_KIND_BY_TYPE[type(body)], body=body, at=utc_now())
        self.steps.append(step)
        if self.persist_path:
            with self.persist_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")
        return step

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[Step]:
        return iter(self.steps)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for step in self.steps:
                fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path, role: str = "", session_id: str = "") -> "Trajectory":
        trajectory = cls(session_id=session_id or Path(path).stem, role=role or Path(path).stem)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            body = _body_from_dict(record["kind"], record)
            trajectory.steps.append(
                Step(index=record["index"], kind=record["kind"], body=body, at=record.get("at", ""))
            )
        return trajectory

    def phase_boundaries(self) -> tuple[int, ...]:
        return tuple(step.index for step in self.steps if step.kind == "phase_prompt")


# ---------------------------------------------------------------------------
# Indexed view
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    index: int
    kind: str
    digest: str


@dataclass(frozen=True)
class IndexedView:
    entries: tuple[IndexEntry, ...]

    @property
    def count(self) -> int:
        return len(self.entries)

    def render(self) -> str:
        return "\n".join(f"[{e.index}] {e.kind}: {e.digest}" for e in self.entries)


def _digest(body: StepBody) -> str:
    if isinstance(body, ToolCall):
        text = f"{body.tool} {json.dumps(body.args, sort_keys=True)}"
    elif isinstance(body, ToolResult):
        text = f"exit={body.exit_code} {body.output}"
    else:
        text = body.text
    text = " ".join(text.split())
    if len(text) > DIGEST_LIMIT:
        text = text[: DIGEST_LIMIT - 1] + "…"
    return text


def render_index(trajectory: Trajectory) -> IndexedView:
    """Compact one-line-per-step summary; details stay reachable via fetch_step."""
    return IndexedView(
        entries=tuple(
            IndexEntry(index=step.index, kind=step.kind, digest=_digest(step.body))
            for step in trajectory
        )
    )


def fetch_step(trajectory: Trajectory, index: int) -> Step:
    if not 0 <= index < len(trajectory):
        raise IndexOutOfRange(index, len(trajectory))
    return trajectory.steps[index]


# ---------------------------------------------------------------------------
# Session configuration and loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentSessionConfig:
    role: str
    system_prompt: str
    tool_allowlist: tuple[str, ...]
    backend: BackendRef
    max_turns: int = 60
    per_tool_timeout: float = 300.0
    output_truncation_limit: int = 64 * 1024
    network: bool = False
    read_only: bool = False
    kb_root: Path | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.per_tool_timeout <= 0:
            raise ValueError("per_tool_timeout must be positive")
        interactive = INTERACTIVE_TOOLS.intersection(self.tool_allowlist)
        if interactive:
            raise ValueError(f"interactive tools are never allowed: {sorted(interactive)}")


@dataclass(frozen=True)
class PhaseOutcome:
    final: str | None
    hit_turn_limit: bool = False


ToolObserver = Callable[[str, dict, ToolOutput], None]


def _elide_middle(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    half = max(limit // 2, 1)
    omitted = len(text) - 2 * half
    return text[:half] + f"\n...[{omitted} bytes elided]...\n" + text[-half:]


class AgentSession:
    """One agent session: shared context across phases, one trajectory."""

    def __init__(
        self,
        config: AgentSessionConfig,
        workspace: Path,
        persist_path: Path | None = None,
        registry: ToolRegistry | None = None,
        extra_tools: dict[str, Callable] | None = None,
        transport=None,
    ):
        self.config = config
        self.workspace = Path(workspace)
        self.registry = registry or default_registry()
        for name, handler in (extra_tools or {}).items():
            self.registry.register(name, handler)
        unknown = set(config.tool_allowlist) - self.registry.names()
        if unknown:
            raise ValueError(f"allowlisted tools are not registered: {sorted(unknown)}")
        self.session_id = f"{config.role}-{uuid.uuid4().hex[:12]}"
        self.trajectory = Trajectory(self.session_id, config.role, persist_path)
        self.backend = make_backend(
            config.backend,
            system_prompt=config.system_prompt,
            tool_names=config.tool_allowlist,
            transport=transport,
        )
        self._observers: list[ToolObserver] = []
        self._started = False
        self._phase_final: str | None = None
        self._turns_used = 0

    def add_tool_observer(self, observer: ToolObserver) -> None:
        """Observers see every executed (not denied) tool call with its raw output."""
        self._observers.append(observer)

    @property
    def last_final(self) -> str | None:
        return self._phase_final

    def run(self, initial_prompt: str) -> PhaseOutcome:
        if self._started:
            raise SessionClosed("session already started; use continue_phase")
        self._started = True
        return self._enter_phase(initial_prompt)

    def continue_phase(self, phase_prompt: str) -> PhaseOutcome:
        if not self._started:
            raise SessionClosed("session never started")
        if self._phase_final is None:
            raise SessionClosed("current phase has no final message; cannot continue")
        return self._enter_phase(phase_prompt)

    def _enter_phase(self, prompt: str) -> PhaseOutcome:
        self._phase_final = None
        self.trajectory.append(PhasePrompt(text=prompt))
        self.backend.push_prompt(prompt)
        return self._loop()

    def _loop(self) -> PhaseOutcome:
        while self._turns_used < self.config.max_turns:
            self._turns_used += 1
            turn: BackendTurn = self.backend.next_turn()
            if turn.thinking:
                self.trajectory.append(Thinking(text=turn.thinking))
            for call in turn.tool_calls:
                self.trajectory.append(ToolCall(tool=call.tool, args=call.args))
                result_text, exit_code, truncated = self._execute(call.tool, call.args)
                self.trajectory.append(
                    ToolResult(output=result_text, exit_code=exit_code, truncated=truncated)
                )
                view = _elide_middle(result_text, self.config.output_truncation_limit)
                self.backend.push_tool_result(call.tool, f"exit={exit_code}\n{view}")
            if turn.final is not None:
                self.trajectory.append(FinalMessage(text=turn.final))
                self._phase_final = turn.final
                return PhaseOutcome(final=turn.final)
        self.trajectory.incomplete = True
        return PhaseOutcome(final=None, hit_turn_limit=True)

    def _execute(self, tool: str, args: dict) -> tuple[str, int, bool]:
        if tool not in self.config.tool_allowlist:
            return (
                f"ToolDenied: tool {tool!r} is not permitted in this session",
                DENIED_EXIT_CODE,
                False,
            )
        ctx = ToolContext(
            workspace=self.workspace,
            kb_root=self.config.kb_root,
            timeout=self.config.per_tool_timeout,
            network=self.config.network,
            read_only=self.config.read_only,
        )
        output = self.registry.execute(tool, args, ctx)
        for observer in self._observers:
            observer(tool, args, output)
        # Full text is stored; truncation to the model context happens in _loop.
        over_limit = len(output.combined) > self.config.output_truncation_limit
        return output.combined, output.exit_code, output.truncated or over_limit


def run_session(
    config: AgentSessionConfig,
    initial_prompt: str,
    workspace: Path,
    persist_path: Path | None = None,
) -> tuple[Trajectory, PhaseOutcome]:
    """Single-phase convenience wrapper around AgentSession."""
    session = AgentSession(config, workspace, persist_path)
    outcome = session.run(initial_prompt)
    return session.trajectory, outcome
