"""Stage 3: independently re-execute the PoC in a fresh workspace and adjudicate.

The checker session never sees the generator's context: its prompts are built
from the report, the PoC files and the generator's evidence files only. The
expected signal is evaluated mechanically against checker-owned evidence
before the agent reasons, and an unmatched signal can never be overturned into
a valid verdict.
"""

from __future__ import annotations

import json
import re
import shutil
from dataclasses import dataclass
from pathlib import Path

from ..model import BugReport, EvidenceBundle, EvidenceWriter, PoCArtifact, tree_hash, utc_now
from ..runtime import AgentSession, AgentSessionConfig, Trajectory
from ..toolkit import ToolError, ToolOutput, exec_bash
from .common import ParseFailure, clip, parse_envelope, render_prompt

CHECKER_TOOLS = ("bash", "edit", "search")

REASON_CODES = (
    "signal-absent",
    "mimic-standalone",
    "internal-api-or-unrealistic",
    "unrelated-error",
    "evidence-mismatch",
)
_REALISM_CODES = ("mimic-standalone", "internal-api-or-unrealistic", "unrelated-error")

MATCHER_KINDS = ("stderr_regex", "stdout_regex", "nonzero_exit_with_pattern", "trace_pair_diff")
_FILE_CAP = 4000


@dataclass(frozen=True)
class Matcher:
    kind: str
    pattern: str = ""
    path_a: str = ""
    path_b: str = ""
    comparator: str = "byte-diff"
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in MATCHER_KINDS:
            raise ValueError(f"unknown matcher kind {self.kind!r}")
        if self.kind == "trace_pair_diff":
            if not self.path_a or not self.path_b:
                raise ValueError("trace_pair_diff requires path_a and path_b")
            if self.comparator not in ("byte-diff", "numeric-threshold"):
                raise ValueError(f"unknown comparator {self.comparator!r}")
        else:
            if not self.pattern:
                raise ValueError(f"{self.kind} requires a pattern")
            re.compile(self.pattern)  # must compile; raises re.error otherwise

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pattern": self.pattern,
            "path_a": self.path_a,
            "path_b": self.path_b,
            "comparator": self.comparator,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class SignalSpec:
    description: str
    matchers: tuple[Matcher, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        if not self.matchers:
            raise ValueError("a signal spec needs at least one machine-checkable matcher")

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "matchers": [m.to_dict() for m in self.matchers],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SignalSpec":
        try:
            matchers = tuple(
                Matcher(
                    kind=str(item.get("kind", "")),
                    pattern=str(item.get("pattern", "") or ""),
                    path_a=str(item.get("path_a", "") or ""),
                    path_b=str(item.get("path_b", "") or ""),
                    comparator=str(item.get("comparator", "byte-diff") or "byte-diff"),
                    threshold=float(item.get("threshold", 0.0) or 0.0),
                )
                for item in data.get("matchers", [])
            )
            return cls(
                description=str(data.get("description", "")),
                matchers=matchers,
                provenance=str(data.get("provenance", "")),
            )
        except (ValueError, re.error, TypeError) as exc:
            raise ParseFailure(f"bad signal spec: {exc}") from exc


@dataclass(frozen=True)
class MatcherResult:
    matcher: Matcher
    satisfied: bool
    detail: str

    def to_dict(self) -> dict:
        return {"matcher": self.matcher.to_dict(), "satisfied": self.satisfied, "detail": self.detail}


@dataclass(frozen=True)
class CheckOutcome:
    decision: str  # "valid" | "invalid"
    fresh_evidence: EvidenceBundle
    reason_code: str | None = None
    detail: str = ""
    realism: str | None = None  # "pass" | "fail" | None when never reached
    matcher_results: tuple[MatcherResult, ...] = ()
    signal: SignalSpec | None = None

    def __post_init__(self) -> None:
        if self.decision == "valid":
            if self.realism != "pass" or not any(r.satisfied for r in self.matcher_results):
                raise ValueError("valid requires realism pass and a satisfied matcher")
        elif self.decision == "invalid":
            if self.reason_code not in REASON_CODES:
                raise ValueError(f"invalid requires a reason code from {REASON_CODES}")
            if not self.detail:
                raise ValueError("invalid requires a nonempty detail")
        else:
            raise ValueError(f"unknown decision {self.decision!r}")

    @property
    def valid(self) -> bool:
        return self.decision == "valid"


# ---------------------------------------------------------------------------
# Mechanical matcher evaluation
# ---------------------------------------------------------------------------


def _read_text(path: Path) -> str | None:
    try:
        return path.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return None


def _resolve_trace(name: str, evidence: EvidenceBundle, workspace: Path | None) -> Path | None:
    candidates = [Path(evidence.dir) / name, Path(evidence.dir) / "traces" / name]
    if workspace is not None:
        candidates.append(Path(workspace) / name)
    for candidate in candidates:
        if candidate.is_file():
            return candidate
    return None


def evaluate_matcher(
    matcher: Matcher, evidence: EvidenceBundle, workspace: Path | None = None
) -> MatcherResult:
    if matcher.kind in ("stderr_regex", "stdout_regex"):
        suffix = ".stderr" if matcher.kind == "stderr_regex" else ".stdout"
        pattern = re.compile(matcher.pattern)
        for ref in evidence.traces:
            if not ref.path.endswith(suffix):
                continue
            text = _read_text(evidence.trace_path(ref)) or ""
            found = pattern.search(text)
            if found:
                return MatcherResult(
                    matcher, True, f"pattern matched in {ref.path}: {found.group(0)[:200]!r}"
                )
        return MatcherResult(matcher, False, f"pattern not found in any {suffix} trace")

    if matcher.kind == "nonzero_exit_with_pattern":
        pattern = re.compile(matcher.pattern)
        for record in evidence.command_log:
            if record.exit_code == 0:
                continue
            chunks = []
            for trace in (record.stdout_trace, record.stderr_trace):
                if trace:
                    chunks.append(_read_text(Path(evidence.dir) / trace) or "")
            found = pattern.search("\n".join(chunks))
            if found:
                return MatcherResult(
                    matcher,
                    True,
                    f"command {record.command!r} exited {record.exit_code} with matching output",
                )
        return MatcherResult(matcher, False, "no failing command produced the pattern")

    # trace_pair_diff
    path_a = _resolve_trace(matcher.path_a, evidence, workspace)
    path_b = _resolve_trace(matcher.path_b, evidence, workspace)
    if path_a is None or path_b is None:
        return MatcherResult(matcher, False, "one or both trace files are missing")
    if matcher.comparator == "byte-diff":
        differ = path_a.read_bytes() != path_b.read_bytes()
        return MatcherResult(matcher, differ, "byte contents differ" if differ else "byte-identical")
    number_re = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")
    values = []
    for path in (path_a, path_b):
        found = number_re.search(_read_text(path) or "")
        if not found:
            return MatcherResult(matcher, False, f"no numeric value in {path.name}")
        values.append(float(found.group(0)))
    delta = abs(values[0] - values[1])
    satisfied = delta > matcher.threshold
    return MatcherResult(
        matcher, satisfied, f"|{values[0]:g} - {values[1]:g}| = {delta:g} vs threshold {matcher.threshold:g}"
    )


def evaluate_matchers(
    signal: SignalSpec, evidence: EvidenceBundle, workspace: Path | None = None
) -> tuple[MatcherResult, ...]:
    return tuple(evaluate_matcher(m, evidence, workspace) for m in signal.matchers)


# ---------------------------------------------------------------------------
# Fresh workspace preparation and re-execution
# ---------------------------------------------------------------------------


def prepare_fresh_workspace(poc: PoCArtifact, pristine_tree: Path, fresh_ws: Path) -> None:
    """Fresh workspace = pristine tree + the PoC manifest files, nothing else.

    The generator's build artifacts are deliberately not copied.
    """
    fresh_ws = Path(fresh_ws)
    if fresh_ws.exists():
        shutil.rmtree(fresh_ws)
    shutil.copytree(pristine_tree, fresh_ws)
    target_root = fresh_ws / "poc"
    for rel in poc.files:
        src = Path(poc.root_dir) / rel
        dst = target_root / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(src, dst)


def execute_entrypoint(
    poc: PoCArtifact,
    fresh_ws: Path,
    writer: EvidenceWriter,
    *,
    timeout: float = 300.0,
    network: bool = False,
) -> None:
    """Run every declared entrypoint command; failures are evidence, not errors."""
    for command in poc.entrypoint:
        try:
            output = exec_bash(command, fresh_ws, timeout, network=network)
        except ToolError as exc:
            output = ToolOutput(stderr=f"{type(exc).__name__}: {exc}", exit_code=126)
        writer.record(
            command=command,
            stdout=output.stdout,
            stderr=output.stderr,
            exit_code=output.exit_code,
            duration_ms=output.duration_ms,
        )


def reexecute(
    poc: PoCArtifact,
    pristine_tree: Path,
    fresh_ws: Path,
    evidence_dir: Path,
    *,
    image: str = "",
    timeout: float = 300.0,
    network: bool = False,
) -> EvidenceBundle:
    """Standalone re-execution: prepare the fresh workspace, run, collect evidence."""
    prepare_fresh_workspace(poc, pristine_tree, fresh_ws)
    writer = EvidenceWriter(
        evidence_dir,
        {"image": image, "workspace_hash": tree_hash(fresh_ws), "at": utc_now()},
    )
    execute_entrypoint(poc, fresh_ws, writer, timeout=timeout, network=network)
    return writer.bundle()


# ---------------------------------------------------------------------------
# Prompt material (built strictly from report + PoC + generator evidence)
# ---------------------------------------------------------------------------


def _poc_listing(poc: PoCArtifact) -> str:
    lines = [
        "entrypoint commands:",
        *(f"  $ {c}" for c in poc.entrypoint),
        f"expected signal (claimed): {poc.expected_signal or '(none given)'}",
        f"notes: {poc.notes or '(none)'}",
    ]
    for rel in poc.files:
        text = _read_text(Path(poc.root_dir) / rel)
        lines.append(f"--- poc/{rel} ---")
        lines.append(clip(text if text is not None else "(unreadable)", _FILE_CAP))
    return "\n".join(lines)


def _evidence_listing(evidence: EvidenceBundle | None) -> str:
    if evidence is None:
        return "(no evidence provided)"
    lines = ["command log:"]
    if not evidence.command_log:
        lines.append("  (empty)")
    for record in evidence.command_log:
        lines.append(f"  $ {record.command}  [exit {record.exit_code}, {record.duration_ms} ms]")
    for ref in evidence.traces:
        text = _read_text(evidence.trace_path(ref))
        if text is None or not text.strip():
            continue
        lines.append(f"--- {ref.path} ---")
        lines.append(clip(text, _FILE_CAP))
    return "\n".join(lines)


def _reexec_summary(evidence: EvidenceBundle) -> str:
    lines = []
    for record in evidence.command_log:
        lines.append(f"$ {record.command}")
        lines.append(f"exit {record.exit_code} after {record.duration_ms} ms")
        for trace in (record.stdout_trace, record.stderr_trace):
            if not trace:
                continue
            text = _read_text(Path(evidence.dir) / trace) or ""
            if text.strip():
                lines.append(f"[{trace}]")
                lines.append(clip(text, _FILE_CAP))
    return "\n".join(lines) if lines else "(no commands executed)"


def _matcher_table(results: tuple[MatcherResult, ...]) -> str:
    lines = []
    for i, result in enumerate(results):
        status = "SATISFIED" if result.satisfied else "not satisfied"
        lines.append(f"{i}. [{status}] {result.matcher.kind}: {result.detail}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# The three-phase checker run
# ---------------------------------------------------------------------------


def derive_signal_from_final(final: str | None) -> SignalSpec:
    return SignalSpec.from_dict(parse_envelope(final))


def check(
    report: BugReport,
    poc: PoCArtifact,
    generator_evidence: EvidenceBundle | None,
    pristine_tree: Path,
    config: AgentSessionConfig,
    *,
    fresh_ws: Path,
    evidence_dir: Path,
    persist_path: Path | None = None,
    prompt_dir: Path | None = None,
    project_image: str = "",
) -> tuple[CheckOutcome, Trajectory]:
    config = AgentSessionConfig(
        role="checker",
        system_prompt=config.system_prompt,
        tool_allowlist=CHECKER_TOOLS + (("web_fetch",) if config.network else ()),
        backend=config.backend,
        max_turns=config.max_turns,
        per_tool_timeout=config.per_tool_timeout,
        output_truncation_limit=config.output_truncation_limit,
        network=config.network,
    )
    prepare_fresh_workspace(poc, pristine_tree, fresh_ws)
    writer = EvidenceWriter(
        Path(evidence_dir),
        {"image": project_image, "workspace_hash": tree_hash(fresh_ws), "at": utc_now()},
    )
    session = AgentSession(config, fresh_ws, persist_path)

    def invalid(code: str, detail: str, *, signal=None, results=(), realism=None) -> CheckOutcome:
        evidence = writer.bundle()
        if signal is not None:
            _persist_adjudication(writer.dir, signal, results)
        return CheckOutcome(
            decision="invalid",
            fresh_evidence=evidence,
            reason_code=code,
            detail=detail,
            realism=realism,
            matcher_results=tuple(results),
            signal=signal,
        )

    # Phase 1: derive the expected signal from report + PoC + claimed evidence only.
    phase1 = session.run(
        render_prompt(
            "checker_phase1",
            prompt_dir,
            report=report.render(),
            poc_listing=_poc_listing(poc),
            evidence_listing=_evidence_listing(generator_evidence),
        )
    )
    if phase1.hit_turn_limit:
        return invalid("evidence-mismatch", "no derivable signal: turn limit"), session.trajectory
    try:
        signal = derive_signal_from_final(phase1.final)
    except ParseFailure as exc:
        return invalid("evidence-mismatch", f"no derivable signal: {exc}"), session.trajectory

    # Phase 2: the stage re-executes the entrypoint for real; the agent may probe further.
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
    execute_entrypoint(
        poc, fresh_ws, writer, timeout=config.per_tool_timeout, network=config.network
    )
    phase2 = session.continue_phase(
        render_prompt("checker_phase2", prompt_dir, reexec_summary=_reexec_summary(writer.bundle()))
    )
    if phase2.hit_turn_limit:
        return (
            invalid("evidence-mismatch", "checker session hit the turn limit in phase 2", signal=signal),
            session.trajectory,
        )

    # Mechanical gate: evaluated before the agent gets to reason about validity.
    evidence = writer.bundle()
    results = evaluate_matchers(signal, evidence, fresh_ws)
    _persist_adjudication(writer.dir, signal, results)
    mechanically_satisfied = any(r.satisfied for r in results)

    phase3 = session.continue_phase(
        render_prompt("checker_phase3", prompt_dir, matcher_results=_matcher_table(results))
    )
    if phase3.hit_turn_limit:
        return (
            invalid(
                "evidence-mismatch",
                "checker session hit the turn limit in phase 3",
                signal=signal,
                results=results,
            ),
            session.trajectory,
        )
    try:
        env = parse_envelope(phase3.final)
        realism = env.get("realism")
        if realism not in ("pass", "fail"):
            raise ParseFailure(f"realism must be pass or fail, got {realism!r}")
    except ParseFailure as exc:
        return (
            invalid(
                "evidence-mismatch",
                f"unparseable adjudication: {exc}",
                signal=signal,
                results=results,
            ),
            session.trajectory,
        )

    if not mechanically_satisfied:
        # The agent cannot overturn an unmatched signal, whatever it concluded.
        return (
            invalid(
                "signal-absent",
                "no expected signal observed in the fresh re-execution",
                signal=signal,
                results=results,
                realism=realism,
            ),
            session.trajectory,
        )
    if realism == "fail":
        code = env.get("reason_code")
        if code not in _REALISM_CODES:
            code = "internal-api-or-unrealistic"
        detail = str(env.get("detail") or "realism check failed")
        return (
            invalid(code, detail, signal=signal, results=results, realism="fail"),
            session.trajectory,
        )
    outcome = CheckOutcome(
        decision="valid",
        fresh_evidence=evidence,
        realism="pass",
        matcher_results=results,
        signal=signal,
        detail=str(env.get("detail") or ""),
    )
    return outcome, session.trajectory


def _persist_adjudication(
    evidence_dir: Path, signal: SignalSpec, results: tuple[MatcherResult, ...]
) -> None:
    """Store the signal spec and matcher verdicts with the checker's evidence.

    Bundles stay re-checkable offline: signal.json + the trace files are
    enough to re-run the matchers without any pipeline state.
    """
    evidence_dir = Path(evidence_dir)
    (evidence_dir / "signal.json").write_text(json.dumps(signal.to_dict(), indent=2))
    (evidence_dir / "matcher_results.json").write_text(
        json.dumps([r.to_dict() for r in results], indent=2)
    )
