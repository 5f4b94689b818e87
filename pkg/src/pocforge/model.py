"""Shared data model: bug reports, verdicts, PoC artifacts, evidence, bundles.

Everything here is plain data plus file I/O. Values are immutable after
construction and safe to hand between threads; concurrent bundle writes must
target distinct report ids.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

REJECTION_STAGES = ("analysis", "generation", "checking")

# Fixed bundle layout. The directory names are part of the output contract.
POC_DIR = "poc"
EVIDENCE_GENERATOR_DIR = "evidence-generator"
EVIDENCE_CHECKER_DIR = "evidence-checker"
TRAJECTORIES_DIR = "trajectories"
VERDICT_FILE = "verdict.json"
REPORT_FILE = "report.md"
MANIFEST_FILE = "manifest.json"


class ReportError(Exception):
    """Base class for report-loading failures."""


class MissingField(ReportError):
    def __init__(self, name: str):
        super().__init__(f"report header is missing required field '{name}'")
        self.name = name


class EmptyBody(ReportError):
    def __init__(self) -> None:
        super().__init__("report body is empty")


class UnreadableFile(ReportError):
    def __init__(self, path: object, cause: Exception):
        super().__init__(f"cannot read report file {path}: {cause}")
        self.path = path


class InconsistentVerdict(Exception):
    """A verdict whose parts contradict each other (e.g. validated without checker evidence)."""


class IoFailure(Exception):
    """Filesystem failure while writing an output bundle."""


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def tree_hash(root: Path) -> str:
    """Deterministic content hash of a directory tree (names + bytes)."""
    digest = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file() and not p.is_symlink()):
        rel = path.relative_to(root).as_posix()
        digest.update(rel.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(path.read_bytes())
        digest.update(b"\x01")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Bug reports
# ---------------------------------------------------------------------------

_KNOWN_HEADER_KEYS = ("id", "project", "title", "claimed_locations", "claimed_bug_class", "source")


@dataclass(frozen=True)
class BugReport:
    """One candidate defect report, parsed from a markdown file."""

    id: str
    project: str
    title: str
    body: str
    claimed_locations: tuple[str, ...] = ()
    claimed_bug_class: str | None = None
    source: str = ""

    def render(self) -> str:
        """Render back to the on-disk header + body format."""
        lines = [f"id: {self.id}", f"project: {self.project}", f"title: {self.title}"]
        if self.claimed_locations:
            lines.append("claimed_locations: " + ", ".join(self.claimed_locations))
        if self.claimed_bug_class:
            lines.append(f"claimed_bug_class: {self.claimed_bug_class}")
        if self.source:
            lines.append(f"source: {self.source}")
        return "\n".join(lines) + "\n\n" + self.body.rstrip() + "\n"


def parse_report(text: str) -> BugReport:
    """Parse report text: leading ``key: value`` header lines, blank line, body.

    An optional ``---`` fence pair around the header is tolerated. Unknown
    header keys are preserved as ``key=value`` fragments appended to source.
    """
    lines = text.splitlines()
    pos = 0
    fenced = bool(lines) and lines[0].strip() == "---"
    if fenced:
        pos = 1
    header: dict[str, str] = {}
    order: list[str] = []
    while pos < len(lines):
        line = lines[pos]
        if fenced and line.strip() == "---":
            pos += 1
            break
        if not line.strip():
            if not fenced:
                pos += 1
                break
            pos += 1
            continue
        if ":" not in line:
            break  # header ends at the first non key:value line
        key, _, value = line.partition(":")
        key = key.strip().lower()
        if key and key not in header:
            header[key] = value.strip()
            order.append(key)
        pos += 1
    body = "\n".join(lines[pos:]).strip()

    for required in ("id", "project", "title"):
        if not header.get(required):
            raise MissingField(required)
    if not body:
        raise EmptyBody()

    locations = tuple(
        part.strip() for part in header.get("claimed_locations", "").split(",") if part.strip()
    )
    source = header.get("source", "")
    extras = [f"{k}={header[k]}" for k in order if k not in _KNOWN_HEADER_KEYS]
    if extras:
        source = "; ".join(filter(None, [source] + extras))
    return BugReport(
        id=header["id"],
        project=header["project"],
        title=header["title"],
        body=body,
        claimed_locations=locations,
        claimed_bug_class=header.get("claimed_bug_class") or None,
        source=source,
    )


def load_report(path: Path | str) -> BugReport:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableFile(path, exc) from exc
    return parse_report(text)


# ---------------------------------------------------------------------------
# PoC artifacts and execution evidence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoCArtifact:
    """A reproducer extracted into its own directory plus the commands that run it."""

    root_dir: Path
    files: tuple[str, ...]
    entrypoint: tuple[str, ...]
    expected_signal: str = ""
    notes: str = ""

    def __post_init__(self) -> None:
        if not self.entrypoint:
            raise ValueError("PoC entrypoint must not be empty")

    def to_dict(self) -> dict:
        return {
            "root_dir": str(self.root_dir),
            "files": list(self.files),
            "entrypoint": list(self.entrypoint),
            "expected_signal": self.expected_signal,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoCArtifact":
        return cls(
            root_dir=Path(data["root_dir"]),
            files=tuple(data["files"]),
            entrypoint=tuple(data["entrypoint"]),
            expected_signal=data.get("expected_signal", ""),
            notes=data.get("notes", ""),
        )


@dataclass(frozen=True)
class TraceRef:
    label: str
    path: str  # relative to the evidence directory


@dataclass(frozen=True)
class CommandRecord:
    command: str
    exit_code: int
    duration_ms: int
    stdout_trace: str | None = None
    stderr_trace: str | None = None

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "exit_code": self.exit_code,
            "duration_ms": self.duration_ms,
            "stdout_trace": self.stdout_trace,
            "stderr_trace": self.stderr_trace,
        }


@dataclass(frozen=True)
class EvidenceBundle:
    """Execution traces plus the command log and environment fingerprint."""

    dir: Path
    traces: tuple[TraceRef, ...] = ()
    command_log: tuple[CommandRecord, ...] = ()
    env_fingerprint: dict = field(default_factory=dict)
    executed: bool = False

    def __post_init__(self) -> None:
        if self.executed and not self.command_log:
            raise ValueError("an executed evidence bundle must carry a nonempty command log")

    def trace_path(self, ref: TraceRef) -> Path:
        return Path(self.dir) / ref.path

    @classmethod
    def from_dir(cls, dir: Path) -> "EvidenceBundle":
        """Reload a bundle previously written by EvidenceWriter."""
        dir = Path(dir)
        log_file = dir / "command_log.json"
        records: list[CommandRecord] = []
        if log_file.exists():
            for item in json.loads(log_file.read_text()):
                records.append(
                    CommandRecord(
                        command=item["command"],
                        exit_code=item["exit_code"],
                        duration_ms=item["duration_ms"],
                        stdout_trace=item.get("stdout_trace"),
                        stderr_trace=item.get("stderr_trace"),
                    )
                )
        env_file = dir / "env.json"
        fingerprint = json.loads(env_file.read_text()) if env_file.exists() else {}
        traces = tuple(
            TraceRef(label=p.name, path=f"traces/{p.name}")
            for p in sorted((dir / "traces").glob("*"))
            if p.is_file()
        )
        return cls(
            dir=dir,
            traces=traces,
            command_log=tuple(records),
            env_fingerprint=fingerprint,
            executed=bool(records),
        )


class EvidenceWriter:
    """Accumulates command executions into an evidence directory.

    Layout: ``env.json``, ``command_log.json`` and ``traces/cmd-NNN.{stdout,stderr}``.
    The writer is the only producer of the command log, so an agent cannot
    claim executions that never went through the toolkit.
    """

    def __init__(self, dir: Path, env_fingerprint: dict):
        self.dir = Path(dir)
        (self.dir / "traces").mkdir(parents=True, exist_ok=True)
        self._records: list[CommandRecord] = []
        self._fingerprint = dict(env_fingerprint)
        (self.dir / "env.json").write_text(json.dumps(self._fingerprint, sort_keys=True, indent=2))
        self._flush()

    def record(self, command: str, stdout: str, stderr: str, exit_code: int, duration_ms: int) -> CommandRecord:
        index = len(self._records)
        out_name = f"cmd-{index:03d}.stdout"
        err_name = f"cmd-{index:03d}.stderr"
        (self.dir / "traces" / out_name).write_text(stdout)
        (self.dir / "traces" / err_name).write_text(stderr)
        rec = CommandRecord(
            command=command,
            exit_code=exit_code,
            duration_ms=duration_ms,
            stdout_trace=f"traces/{out_name}",
            stderr_trace=f"traces/{err_name}",
        )
        self._records.append(rec)
        self._flush()
        return rec

    def _flush(self) -> None:
        payload = [rec.to_dict() for rec in self._records]
        (self.dir / "command_log.json").write_text(json.dumps(payload, indent=2))

    def bundle(self) -> EvidenceBundle:
        return EvidenceBundle.from_dir(self.dir)


# ---------------------------------------------------------------------------
# Verdicts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    """Either a validated PoC bundle or a faithful rejection, never both."""

    kind: str  # "validated" | "rejected"
    poc: PoCArtifact | None = None
    generator_evidence: EvidenceBundle | None = None
    checker_evidence: EvidenceBundle | None = None
    stage: str | None = None
    reason: str | None = None
    reason_code: str | None = None

    def __post_init__(self) -> None:
        if self.kind == "validated":
            if self.stage is not None or self.reason is not None:
                raise ValueError("a validated verdict must not carry rejection fields")
            if self.poc is None:
                raise ValueError("a validated verdict requires a PoC artifact")
        elif self.kind == "rejected":
            if self.poc is not None or self.generator_evidence is not None or self.checker_evidence is not None:
                raise ValueError("a rejected verdict must not carry PoC or evidence")
            if self.stage not in REJECTION_STAGES:
                raise ValueError(f"rejection stage must be one of {REJECTION_STAGES}")
            if not self.reason:
                raise ValueError("a rejected verdict requires a nonempty reason")
        else:
            raise ValueError(f"unknown verdict kind {self.kind!r}")

    @classmethod
    def validated(
        cls,
        poc: PoCArtifact,
        generator_evidence: EvidenceBundle | None,
        checker_evidence: EvidenceBundle,
    ) -> "Verdict":
        return cls(
            kind="validated",
            poc=poc,
            generator_evidence=generator_evidence,
            checker_evidence=checker_evidence,
        )

    @classmethod
    def rejected(cls, stage: str, reason: str, reason_code: str | None = None) -> "Verdict":
        return cls(kind="rejected", stage=stage, reason=reason, reason_code=reason_code)

    @property
    def is_validated(self) -> bool:
        return self.kind == "validated"

    def to_dict(self) -> dict:
        if self.kind == "rejected":
            return {
                "kind": "rejected",
                "stage": self.stage,
                "reason": self.reason,
                "reason_code": self.reason_code,
            }
        return {
            "kind": "validated",
            "poc": self.poc.to_dict() if self.poc else None,
            "generator_evidence": str(self.generator_evidence.dir) if self.generator_evidence else None,
            "checker_evidence": str(self.checker_evidence.dir) if self.checker_evidence else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        if data["kind"] == "rejected":
            return cls.rejected(data["stage"], data["reason"], data.get("reason_code"))
        poc = PoCArtifact.from_dict(data["poc"])
        gen = EvidenceBundle.from_dir(Path(data["generator_evidence"])) if data.get("generator_evidence") else None
        chk = EvidenceBundle.from_dir(Path(data["checker_evidence"])) if data.get("checker_evidence") else None
        if chk is None:
            raise InconsistentVerdict("validated verdict without checker evidence")
        return cls.validated(poc, gen, chk)


# ---------------------------------------------------------------------------
# Stage accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageCounts:
    validated: int
    rejected: dict[str, int]

    @property
    def total_rejected(self) -> int:
        return sum(self.rejected.values())

    @property
    def shares(self) -> dict[str, float]:
        """Share of rejections per stage; sums to 1.0 when any rejection exists."""
        total = self.total_rejected
        if total == 0:
            return {stage: 0.0 for stage in REJECTION_STAGES}
        return {stage: self.rejected[stage] / total for stage in REJECTION_STAGES}

    def render(self) -> str:
        parts = [f"validated {self.validated}"]
        for stage in REJECTION_STAGES:
            share = self.shares[stage]
            parts.append(f"{stage} rejected {self.rejected[stage]} ({share * 100:.1f}%)")
        return "; ".join(parts)


def verdict_summary(verdicts: Iterable[Verdict]) -> StageCounts:
    validated = 0
    rejected = {stage: 0 for stage in REJECTION_STAGES}
    for verdict in verdicts:
        if verdict.is_validated:
            validated += 1
        else:
            rejected[verdict.stage] += 1
    return StageCounts(validated=validated, rejected=rejected)


# ---------------------------------------------------------------------------
# Output bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BundleManifest:
    report_id: str
    verdict_kind: str
    root: Path
    paths: dict[str, str]  # logical name -> path relative to root
    timings: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "verdict_kind": self.verdict_kind,
            "root": str(self.root),
            "paths": dict(self.paths),
            "timings": dict(self.timings),
        }


def _copy_tree(src: Path, dst: Path) -> None:
    if dst.exists():
        shutil.rmtree(dst)
    shutil.copytree(src, dst)


def write_bundle(
    verdict: Verdict,
    report: BugReport,
    trajectories: Sequence[object],
    out_root: Path,
    timings: dict[str, int] | None = None,
) -> BundleManifest:
    """Write the per-report output bundle and return its manifest.

    Rejections carry verdict.json, the report copy and trajectories; validated
    verdicts additionally get poc/ and both evidence directories. Idempotent
    for identical inputs: verdict.json bytes depend only on the arguments.
    """
    if verdict.is_validated:
        evidence = verdict.checker_evidence
        if evidence is None or not evidence.command_log:
            raise InconsistentVerdict(
                "validated verdict requires checker evidence with a command log"
            )
    timings = dict(timings or {})
    root = Path(out_root) / report.id
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / REPORT_FILE).write_text(report.render(), encoding="utf-8")

        traj_dir = root / TRAJECTORIES_DIR
        traj_dir.mkdir(exist_ok=True)
        for trajectory in trajectories:
            name = getattr(trajectory, "role", "session")
            target = traj_dir / f"{name}.jsonl"
            suffix = 1
            persisted = getattr(trajectory, "persist_path", None)
            while target.exists() and (persisted is None or Path(persisted) != target):
                suffix += 1
                target = traj_dir / f"{name}-{suffix:02d}.jsonl"
            if persisted is None or Path(persisted) != target:
                trajectory.save(target)

        paths = {
            "verdict": VERDICT_FILE,
            "report": REPORT_FILE,
            "trajectories": TRAJECTORIES_DIR + "/",
        }
        verdict_payload = verdict.to_dict()
        if verdict.is_validated:
            _copy_tree(verdict.poc.root_dir, root / POC_DIR)
            if verdict.generator_evidence is not None:
                _copy_tree(verdict.generator_evidence.dir, root / EVIDENCE_GENERATOR_DIR)
            _copy_tree(verdict.checker_evidence.dir, root / EVIDENCE_CHECKER_DIR)
            paths["poc"] = POC_DIR + "/"
            paths["evidence_generator"] = EVIDENCE_GENERATOR_DIR + "/"
            paths["evidence_checker"] = EVIDENCE_CHECKER_DIR + "/"
            # Bundle-relative artifact record: the scratch-tree location is not useful downstream.
            verdict_payload["poc"]["root_dir"] = POC_DIR
            verdict_payload["generator_evidence"] = EVIDENCE_GENERATOR_DIR
            verdict_payload["checker_evidence"] = EVIDENCE_CHECKER_DIR

        record = {
            "report_id": report.id,
            "verdict": verdict_payload,
            "paths": paths,
            "timings": timings,
        }
        (root / VERDICT_FILE).write_text(json.dumps(record, sort_keys=True, indent=2))
        manifest = BundleManifest(
            report_id=report.id,
            verdict_kind=verdict.kind,
            root=root,
            paths=paths,
            timings=timings,
        )
        (root / MANIFEST_FILE).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2))
    except OSError as exc:
        raise IoFailure(f"cannot write bundle under {root}: {exc}") from exc

    for rel in manifest.paths.values():
        if not (root / rel.rstrip("/")).exists():
            raise IoFailure(f"bundle path missing after write: {rel}")
    return manifest
