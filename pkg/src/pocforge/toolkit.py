"""Workspace-confined agent tools: shell execution, file editing, search, web fetch.

Every tool resolves paths (symlinks included) before checking that they stay
under the workspace root or the optional knowledge-base read root. Shell
commands run in their own process group so a timeout can kill the whole tree.
The toolkit does not create containers; the caller supplies an already
isolated root and the network policy flag.
"""

from __future__ import annotations

import os
import re
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

TIMEOUT_EXIT_CODE = 124
TOOL_ERROR_EXIT_CODE = 126

# Hard cap on captured bytes per stream; protects memory, not the model context.
DEFAULT_MAX_CAPTURE = 8 * 1024 * 1024
DEFAULT_FETCH_CAP = 1024 * 1024


class ToolError(Exception):
    """Base class for tool failures that are the caller's fault."""


class PathEscapesWorkspace(ToolError):
    def __init__(self, path: object):
        super().__init__(f"path escapes the workspace: {path}")


class TargetNotFound(ToolError):
    def __init__(self, anchor: str):
        super().__init__(f"replace-range anchor not found: {anchor!r}")


class InvalidPattern(ToolError):
    pass


class NetworkDisabled(ToolError):
    def __init__(self) -> None:
        super().__init__("network access is disabled by policy")


class FetchFailure(ToolError):
    pass


class SpawnFailure(ToolError):
    pass


class WorkspaceReadOnly(ToolError):
    def __init__(self, op: str):
        super().__init__(f"edit op '{op}' denied: workspace is read-only in this session")


@dataclass(frozen=True)
class ToolOutput:
    stdout: str = ""
    stderr: str = ""
    exit_code: int = 0
    duration_ms: int = 0
    truncated: bool = False

    @property
    def combined(self) -> str:
        if self.stderr:
            return self.stdout + ("\n" if self.stdout else "") + "[stderr]\n" + self.stderr
        return self.stdout

    @property
    def timed_out(self) -> bool:
        return self.exit_code == TIMEOUT_EXIT_CODE


def confine_path(raw: str, workspace: Path, extra_roots: Sequence[Path] = ()) -> Path:
    """Resolve ``raw`` against the workspace and require it stays inside a permitted root.

    Symlinks are resolved before the containment check, so a link pointing
    outside the workspace is rejected even when its own path looks local.
    """
    workspace = Path(workspace).resolve()
    candidate = Path(raw)
    if not candidate.is_absolute():
        candidate = workspace / candidate
    resolved = candidate.resolve()
    roots = [workspace] + [Path(r).resolve() for r in extra_roots]
    for root in roots:
        if resolved == root or resolved.is_relative_to(root):
            return resolved
    raise PathEscapesWorkspace(raw)


def _cap(text: str, limit: int) -> tuple[str, bool]:
    if len(text) <= limit:
        return text, False
    return text[:limit], True


def exec_bash(
    cmd: str,
    workspace: Path,
    timeout: float,
    *,
    network: bool = False,
    max_capture: int = DEFAULT_MAX_CAPTURE,
) -> ToolOutput:
    """Run a shell command with cwd at the workspace root.

    On timeout the whole process group is killed, partial output is returned
    and the exit code is marked with TIMEOUT_EXIT_CODE. Network enforcement is
    delegated to the surrounding isolation; the policy flag is exported so
    compliant fixtures and wrappers can honor it.
    """
    workspace = Path(workspace)
    if not workspace.is_dir():
        raise SpawnFailure(f"workspace does not exist: {workspace}")
    env = dict(os.environ)
    env["POCFORGE_NETWORK"] = "1" if network else "0"
    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            ["/bin/bash", "-c", cmd],
            cwd=str(workspace),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=env,
            start_new_session=True,  # own process group -> killable as a tree
        )
    except OSError as exc:
        raise SpawnFailure(str(exc)) from exc

    timed_out = False
    try:
        out_b, err_b = proc.communicate(timeout=timeout)
        exit_code = proc.returncode
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_group(proc.pid)
        out_b, err_b = proc.communicate()
        exit_code = TIMEOUT_EXIT_CODE
    duration_ms = int((time.monotonic() - start) * 1000)

    stdout, t1 = _cap(out_b.decode("utf-8", errors="replace"), max_capture)
    stderr, t2 = _cap(err_b.decode("utf-8", errors="replace"), max_capture)
    if timed_out:
        stderr = stderr + ("\n" if stderr else "") + f"[timeout after {timeout:g}s; process tree killed]"
    return ToolOutput(
        stdout=stdout,
        stderr=stderr,
        exit_code=exit_code,
        duration_ms=duration_ms,
        truncated=t1 or t2,
    )


def _kill_group(pid: int) -> None:
    try:
        os.killpg(pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


EDIT_OPS = ("view", "create", "replace-range", "append")


def edit_file(
    path: str,
    op: str,
    workspace: Path,
    *,
    content: str = "",
    anchor: str = "",
    kb_root: Path | None = None,
    read_only: bool = False,
) -> ToolOutput:
    """Editor tool: view files plus create / replace-range / append mutations.

    replace-range substitutes the first occurrence of ``anchor`` with
    ``content`` and fails with TargetNotFound when the anchor is absent.
    """
    if op not in EDIT_OPS:
        raise ToolError(f"unknown edit op {op!r}; expected one of {EDIT_OPS}")
    extra = (kb_root,) if kb_root else ()
    resolved = confine_path(path, workspace, extra)
    if op == "view":
        try:
            return ToolOutput(stdout=resolved.read_text(encoding="utf-8", errors="replace"))
        except OSError as exc:
            raise ToolError(f"cannot read {path}: {exc}") from exc
    if read_only:
        raise WorkspaceReadOnly(op)
    if op == "create":
        resolved.parent.mkdir(parents=True, exist_ok=True)
        resolved.write_text(content, encoding="utf-8")
        return ToolOutput(stdout=f"created {path} ({len(content)} bytes)")
    if op == "append":
        resolved.parent.mkdir(parents=True, exist_ok=True)
        with resolved.open("a", encoding="utf-8") as fh:
            fh.write(content)
        return ToolOutput(stdout=f"appended {len(content)} bytes to {path}")
    # replace-range
    try:
        old = resolved.read_text(encoding="utf-8")
    except OSError as exc:
        raise ToolError(f"cannot read {path}: {exc}") from exc
    if anchor not in old:
        raise TargetNotFound(anchor)
    resolved.write_text(old.replace(anchor, content, 1), encoding="utf-8")
    return ToolOutput(stdout=f"replaced anchor in {path}")


@dataclass(frozen=True)
class SearchHit:
    path: str
    line_no: int
    line: str


def _looks_binary(path: Path) -> bool:
    try:
        return b"\x00" in path.open("rb").read(8192)
    except OSError:
        return True


def search(
    pattern: str,
    scope: str,
    workspace: Path,
    *,
    regex: bool = False,
    max_hits: int = 100,
    kb_root: Path | None = None,
) -> tuple[list[SearchHit], bool]:
    """Search files below ``scope`` for a literal or regex pattern.

    Hits are ordered by path then line number and capped at ``max_hits``;
    the second return value reports whether the cap truncated the results.
    """
    extra = (kb_root,) if kb_root else ()
    root = confine_path(scope, workspace, extra)
    try:
        matcher = re.compile(pattern if regex else re.escape(pattern))
    except re.error as exc:
        raise InvalidPattern(f"bad pattern {pattern!r}: {exc}") from exc

    hits: list[SearchHit] = []
    capped = False
    files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
    base = Path(workspace).resolve()
    for path in files:
        if path.is_symlink() or _looks_binary(path):
            continue
        try:
            text = path.read_text(encoding="utf-8", errors="replace")
        except OSError:
            continue
        try:
            rel = str(path.relative_to(base))
        except ValueError:
            rel = str(path)
        for line_no, line in enumerate(text.splitlines(), start=1):
            if matcher.search(line):
                if len(hits) >= max_hits:
                    return hits, True
                hits.append(SearchHit(path=rel, line_no=line_no, line=line))
    return hits, capped


def web_fetch(
    url: str,
    *,
    enabled: bool,
    max_bytes: int = DEFAULT_FETCH_CAP,
    timeout: float = 30.0,
) -> ToolOutput:
    """Fetch a URL body as text; gated behind the session's network policy."""
    if not enabled:
        raise NetworkDisabled()
    import httpx

    start = time.monotonic()
    try:
        response = httpx.get(url, timeout=timeout, follow_redirects=True)
    except httpx.HTTPError as exc:
        raise FetchFailure(f"fetch of {url} failed: {exc}") from exc
    duration_ms = int((time.monotonic() - start) * 1000)
    body, truncated = _cap(response.text, max_bytes)
    return ToolOutput(
        stdout=body,
        exit_code=0 if response.status_code < 400 else 1,
        duration_ms=duration_ms,
        truncated=truncated,
    )


# ---------------------------------------------------------------------------
# Registry: uniform name -> handler dispatch used by agent sessions
# ---------------------------------------------------------------------------


@dataclass
class ToolContext:
    workspace: Path
    kb_root: Path | None = None
    timeout: float = 300.0
    network: bool = False
    read_only: bool = False
    max_capture: int = DEFAULT_MAX_CAPTURE


Handler = Callable[[dict, ToolContext], ToolOutput]


def _bash_handler(args: dict, ctx: ToolContext) -> ToolOutput:
    cmd = args.get("cmd") or args.get("command")
    if not cmd:
        raise ToolError("bash requires a 'cmd' argument")
    timeout = float(args.get("timeout", ctx.timeout))
    timeout = min(timeout, ctx.timeout)
    return exec_bash(cmd, ctx.workspace, timeout, network=ctx.network, max_capture=ctx.max_capture)


def _edit_handler(args: dict, ctx: ToolContext) -> ToolOutput:
    if "path" not in args or "op" not in args:
        raise ToolError("edit requires 'path' and 'op' arguments")
    return edit_file(
        args["path"],
        args["op"],
        ctx.workspace,
        content=args.get("content", ""),
        anchor=args.get("anchor", ""),
        kb_root=ctx.kb_root,
        read_only=ctx.read_only,
    )


def _search_handler(args: dict, ctx: ToolContext) -> ToolOutput:
    if "pattern" not in args:
        raise ToolError("search requires a 'pattern' argument")
    hits, capped = search(
        args["pattern"],
        args.get("scope", "."),
        ctx.workspace,
        regex=bool(args.get("regex", False)),
        max_hits=int(args.get("max_hits", 100)),
        kb_root=ctx.kb_root,
    )
    lines = [f"{h.path}:{h.line_no}:{h.line}" for h in hits]
    if capped:
        lines.append("[results capped]")
    return ToolOutput(stdout="\n".join(lines))


def _web_fetch_handler(args: dict, ctx: ToolContext) -> ToolOutput:
    if "url" not in args:
        raise ToolError("web_fetch requires a 'url' argument")
    return web_fetch(args["url"], enabled=ctx.network)


class ToolRegistry:
    def __init__(self) -> None:
        self._tools: dict[str, Handler] = {}

    def register(self, name: str, handler: Handler) -> None:
        self._tools[name] = handler

    def names(self) -> frozenset[str]:
        return frozenset(self._tools)

    def execute(self, name: str, args: dict, ctx: ToolContext) -> ToolOutput:
        """Run one tool; caller-fault errors come back as error outputs, not crashes."""
        handler = self._tools[name]
        try:
            return handler(args, ctx)
        except ToolError as exc:
            return ToolOutput(
                stderr=f"{type(exc).__name__}: {exc}",
                exit_code=TOOL_ERROR_EXIT_CODE,
            )


def default_registry() -> ToolRegistry:
    registry = ToolRegistry()
    registry.register("bash", _bash_handler)
    registry.register("edit", _edit_handler)
    registry.register("search", _search_handler)
    registry.register("web_fetch", _web_fetch_handler)
    return registry
