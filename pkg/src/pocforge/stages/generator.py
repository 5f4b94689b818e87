"""Stage 2: synthesize a PoC (phase 1), then re-execute it for evidence (phase 2).

The stage, not the agent, owns the ``poc/`` and ``evidence/`` directory names
and writes the evidence command log from the tool executions it actually
observed, so a session cannot talk its way into a "produced" outcome: a
produced result with no phase-2 execution is downgraded to a give-up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from ..kb import KBSnapshot, KnowledgeBase, KBError
from ..model import BugReport, EvidenceBundle, EvidenceWriter, PoCArtifact, tree_hash, utc_now
from ..runtime import AgentSession, AgentSessionConfig, Trajectory
from ..toolkit import ToolOutput
from .analyzer import Mechanism
from .common import ParseFailure, parse_envelope, render_prompt

logger = logging.getLogger(__name__)

POC_DIR_NAME = "poc"
EVIDENCE_DIR_NAME = "evidence"

GENERATOR_TOOLS = ("bash", "edit", "search")


@dataclass(frozen=True)
class KBRatingRequest:
    entry: str  # "scope/category/slug"
    score: float


@dataclass(frozen=True)
class GenerationOutcome:
    produced: bool
    explanation: str = ""
    poc: PoCArtifact | None = None
    evidence: EvidenceBundle | None = None
    kb_ratings: tuple[KBRatingRequest, ...] = ()
    phase_boundaries: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.produced and (self.poc is None or self.evidence is None):
            raise ValueError("a produced outcome requires both a PoC and evidence")
        if not self.produced and not self.explanation:
            raise ValueError("a give-up outcome requires an explanation")


def _gave_up(explanation: str, session: AgentSession, ratings=()) -> tuple["GenerationOutcome", Trajectory]:
    outcome = GenerationOutcome(
        produced=False,
        explanation=explanation,
        kb_ratings=tuple(ratings),
        phase_boundaries=session.trajectory.phase_boundaries(),
    )
    return outcome, session.trajectory


def _parse_ratings(data: dict) -> tuple[KBRatingRequest, ...]:
    ratings = []
    for item in data.get("kb_ratings", []) or []:
        if not isinstance(item, dict):
            continue
        entry = str(item.get("entry", "")).strip()
        try:
            score = float(item.get("score"))
        except (TypeError, ValueError):
            continue
        if entry:
            ratings.append(KBRatingRequest(entry=entry, score=score))
    return tuple(ratings)


def generate(
    report: BugReport,
    mechanism: Mechanism,
    snapshot: KBSnapshot,
    workspace: Path,
    config: AgentSessionConfig,
    *,
    persist_path: Path | None = None,
    prompt_dir: Path | None = None,
    project_image: str = "",
) -> tuple[GenerationOutcome, Trajectory]:
    """Run both generation phases and gate the outcome on observed execution."""
    workspace = Path(workspace)
    fingerprint = {
        "image": project_image,
        "workspace_hash": tree_hash(workspace),
        "at": utc_now(),
    }
    poc_dir = workspace / POC_DIR_NAME
    evidence_dir = workspace / EVIDENCE_DIR_NAME
    poc_dir.mkdir(exist_ok=True)
    writer = EvidenceWriter(evidence_dir, fingerprint)

    config = AgentSessionConfig(
        role="generator",
        system_prompt=config.system_prompt,
        tool_allowlist=GENERATOR_TOOLS + (("web_fetch",) if config.network else ()),
        backend=config.backend,
        max_turns=config.max_turns,
        per_tool_timeout=config.per_tool_timeout,
        output_truncation_limit=config.output_truncation_limit,
        network=config.network,
        kb_root=config.kb_root,
    )
    session = AgentSession(config, workspace, persist_path)

    # Exactly three pieces of context: the mechanism summary, the report, the KB snapshot.
    prompt = render_prompt(
        "generator_phase1",
        prompt_dir,
        mechanism=mechanism.render(),
        report=report.render(),
        kb_snapshot=snapshot.rendered,
    )
    phase1 = session.run(prompt)
    if phase1.hit_turn_limit:
        return _gave_up("turn limit reached in phase 1", session)
    try:
        env1 = parse_envelope(phase1.final)
    except ParseFailure as exc:
        return _gave_up(f"unparseable phase-1 final message: {exc}", session)
    if env1.get("result") == "give_up":
        return _gave_up(str(env1.get("explanation") or "generator gave up"), session)
    if env1.get("result") != "ready":
        return _gave_up(f"unrecognized phase-1 result {env1.get('result')!r}", session)
    entrypoint = tuple(str(c) for c in env1.get("entrypoint", []) if str(c).strip())
    if not entrypoint:
        return _gave_up("phase-1 declared ready without entrypoint commands", session)

    # Phase 2: every bash execution is teed into the evidence directory.
    def observe(tool: str, args: dict, output: ToolOutput) -> None:
        if tool == "bash":
            writer.record(
                command=str(args.get("cmd") or args.get("command") or ""),
                stdout=output.stdout,
                stderr=output.stderr,
                exit_code=output.exit_code,
                duration_ms=output.duration_ms,
            )

    session.add_tool_observer(observe)
    phase2 = session.continue_phase(render_prompt("generator_phase2", prompt_dir))
    if phase2.hit_turn_limit:
        return _gave_up("turn limit reached in phase 2", session)
    try:
        env2 = parse_envelope(phase2.final)
    except ParseFailure as exc:
        return _gave_up(f"unparseable phase-2 final message: {exc}", session)
    ratings = _parse_ratings(env2)
    if env2.get("result") == "give_up":
        return _gave_up(str(env2.get("explanation") or "generator gave up"), session, ratings)

    evidence = writer.bundle()
    if not evidence.command_log or not evidence.traces:
        # Structural reward-hacking defense: produced without execution is a give-up.
        return _gave_up("no execution evidence collected in phase 2", session, ratings)
    poc_files = tuple(
        sorted(p.relative_to(poc_dir).as_posix() for p in poc_dir.rglob("*") if p.is_file())
    )
    if not poc_files:
        return _gave_up("poc directory is empty", session, ratings)

    poc = PoCArtifact(
        root_dir=poc_dir,
        files=poc_files,
        entrypoint=entrypoint,
        expected_signal=str(env1.get("expected_signal", "")),
        notes=str(env1.get("notes", "")),
    )
    outcome = GenerationOutcome(
        produced=True,
        poc=poc,
        evidence=evidence,
        kb_ratings=ratings,
        phase_boundaries=session.trajectory.phase_boundaries(),
    )
    return outcome, session.trajectory


def apply_ratings(
    ratings: tuple[KBRatingRequest, ...],
    kb: KnowledgeBase,
    session_id: str,
) -> int:
    """Apply session ratings to the store; bad ones are skipped, never fatal."""
    applied = 0
    for request in ratings:
        try:
            kb.rate_entry(request.entry, request.score, session_id)
            applied += 1
        except KBError as exc:
            logger.warning("skipping rating for %s: %s", request.entry, exc)
    return applied
