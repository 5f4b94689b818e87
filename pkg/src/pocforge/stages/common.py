"""Shared stage plumbing: fenced-json envelopes and prompt template loading."""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path
from string import Template

_FENCE_RE = re.compile(r"```json\s*\n(.*?)```", re.DOTALL)


class ParseFailure(Exception):
    """A structured final message was missing or malformed."""


def parse_envelope(text: str | None) -> dict:
    """Extract the last fenced json block from a final message."""
    if not text:
        raise ParseFailure("no final message")
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        raise ParseFailure("final message has no fenced json block")
    try:
        data = json.loads(blocks[-1])
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"fenced block is not valid json: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseFailure("envelope must be a json object")
    return data


def load_prompt(name: str, prompt_dir: Path | None = None) -> Template:
    """Load a prompt template; an operator-supplied directory overrides the built-ins."""
    filename = f"{name}.md"
    if prompt_dir is not None:
        override = Path(prompt_dir) / filename
        if override.exists():
            return Template(override.read_text(encoding="utf-8"))
    text = resources.files("pocforge").joinpath(f"prompts/{filename}").read_text(encoding="utf-8")
    return Template(text)


def render_prompt(name: str, prompt_dir: Path | None = None, **values: str) -> str:
    return load_prompt(name, prompt_dir).safe_substitute(**values)


def clip(text: str, cap: int, marker: str = "\n...[truncated]") -> str:
    if len(text) <= cap:
        return text
    return text[: max(cap - len(marker), 0)] + marker
