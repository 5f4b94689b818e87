"""Stage 1: fact-check a bug report against the codebase without mutating it.

The analysis session gets inspection tools only (its editor runs in read-only
mode) and must end with a structured decision. An unparseable final message is
retried once, then the report is rejected with a parse-failure reason. The
stage never sees the knowledge base, so its rejections stay independent of
accumulated reproduction folklore.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from ..model import BugReport
from ..runtime import AgentSession, AgentSessionConfig, Trajectory
from .common import ParseFailure, clip, parse_envelope, render_prompt

DEFAULT_MECHANISM_CAP = 4000

ANALYZER_TOOLS = ("bash", "edit", "search")


@dataclass(frozen=True)
class Mechanism:
    root_cause: str
    consequence: str
    oracle: str

    def render(self) -> str:
        return (
            f"Root cause: {self.root_cause}\n"
            f"Consequence: {self.consequence}\n"
            f"Oracle: {self.oracle}"
        )


@dataclass(frozen=True)
class FactCheck:
    claim: str
    verdict: str
    step: int | None = None


@dataclass(frozen=True)
class AnalysisOutcome:
    decision: str  # "proceed" | "reject"
    reason: str = ""
    mechanism: Mechanism | None = None
    facts_checked: tuple[FactCheck, ...] = ()

    def __post_init__(self) -> None:
        if self.decision == "proceed" and self.mechanism is None:
            raise ValueError("proceed requires a mechanism summary")
        if self.decision == "reject" and not self.reason:
            raise ValueError("reject requires a nonempty reason")

    @property
    def proceed(self) -> bool:
        return self.decision == "proceed"


def _outcome_from_envelope(data: dict, cap: int) -> AnalysisOutcome:
    decision = data.get("decision")
    if decision not in ("proceed", "reject"):
        raise ParseFailure(f"decision must be proceed or reject, got {decision!r}")
    facts = tuple(
        FactCheck(
            claim=str(item.get("claim", "")),
            verdict=str(item.get("verdict", "")),
            step=item.get("step"),
        )
        for item in data.get("facts_checked", [])
        if isinstance(item, dict)
    )
    if decision == "reject":
        reason = str(data.get("reason") or "").strip()
        if not reason:
            raise ParseFailure("reject without a reason")
        return AnalysisOutcome(decision="reject", reason=reason, facts_checked=facts)
    raw = data.get("mechanism")
    if not isinstance(raw, dict):
        raise ParseFailure("proceed without a mechanism object")
    fields = {}
    for key in ("root_cause", "consequence", "oracle"):
        value = str(raw.get(key) or "").strip()
        if not value:
            raise ParseFailure(f"mechanism field {key!r} is empty")
        fields[key] = clip(value, cap)
    return AnalysisOutcome(decision="proceed", mechanism=Mechanism(**fields), facts_checked=facts)


def make_analyzer_config(base: AgentSessionConfig) -> AgentSessionConfig:
    """Pin the analysis-session invariants: inspection tools, read-only editor."""
    tools = ANALYZER_TOOLS + (("web_fetch",) if base.network else ())
    return replace(base, role="analyzer", tool_allowlist=tools, read_only=True, kb_root=None)


def analyze(
    report: BugReport,
    workspace: Path,
    config: AgentSessionConfig,
    *,
    persist_path: Path | None = None,
    prompt_dir: Path | None = None,
    mechanism_cap: int = DEFAULT_MECHANISM_CAP,
) -> tuple[AnalysisOutcome, Trajectory]:
    config = make_analyzer_config(config)
    session = AgentSession(config, workspace, persist_path)
    prompt = render_prompt(
        "analyzer", prompt_dir, project=report.project, report=report.render()
    )
    outcome = session.run(prompt)
    if outcome.hit_turn_limit:
        return (
            AnalysisOutcome(decision="reject", reason="analysis inconclusive: turn limit reached"),
            session.trajectory,
        )
    try:
        return _outcome_from_envelope(parse_envelope(outcome.final), mechanism_cap), session.trajectory
    except ParseFailure:
        pass
    retry = session.continue_phase(render_prompt("analyzer_retry", prompt_dir))
    if retry.hit_turn_limit:
        return (
            AnalysisOutcome(decision="reject", reason="analysis inconclusive: turn limit reached"),
            session.trajectory,
        )
    try:
        return _outcome_from_envelope(parse_envelope(retry.final), mechanism_cap), session.trajectory
    except ParseFailure as exc:
        return (
            AnalysisOutcome(decision="reject", reason=f"ParseFailure: {exc}"),
            session.trajectory,
        )
