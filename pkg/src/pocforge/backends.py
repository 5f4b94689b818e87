"""Model backends: a deterministic scripted transcript player and an http chat client.

The scripted backend is the test foundation: it replays a fixed transcript of
responses strictly in order and fails loudly on any mismatch, so orchestration
bugs cannot hide behind model nondeterminism.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

BACKEND_KINDS = ("scripted", "http-chat")


class BackendUnavailable(Exception):
    """The configured backend cannot serve the session."""


class TranscriptMismatch(Exception):
    """A scripted transcript diverged from the session (wrong expectation or exhausted)."""


@dataclass(frozen=True)
class BackendRef:
    """Pointer to a backend: a transcript file for scripted, an endpoint for http-chat.

    The location may contain ``{report_id}``, ``{role}`` and ``{seq}``
    placeholders which the orchestrator fills in per session.
    """

    kind: str
    location: str
    model: str = ""
    api_key_env: str = "POCFORGE_API_KEY"

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")

    def resolved(self, report_id: str = "", role: str = "", seq: int = 1) -> "BackendRef":
        location = self.location.format(report_id=report_id, role=role, seq=seq)
        return BackendRef(kind=self.kind, location=location, model=self.model, api_key_env=self.api_key_env)


@dataclass(frozen=True)
class ToolRequest:
    tool: str
    args: dict


@dataclass(frozen=True)
class BackendTurn:
    thinking: str | None = None
    tool_calls: tuple[ToolRequest, ...] = ()
    final: str | None = None


class ScriptedBackend:
    """Replays a JSON transcript: ``{"turns": [{expect?, thinking?, tool_calls?, final?}]}``.

    ``expect`` is a substring that must occur in the text pushed to the
    backend since the previous turn (system prompt and phase prompts count, as
    do tool results). Turns are consumed strictly in order.
    """

    def __init__(self, transcript_path: str | Path):
        path = Path(transcript_path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f"cannot load transcript {path}: {exc}") from exc
        turns = raw.get("turns")
        if not isinstance(turns, list):
            raise BackendUnavailable(f"transcript {path} has no 'turns' list")
        self._path = path
        self._turns = turns
        self._cursor = 0
        self._window: list[str] = []

    def push_prompt(self, text: str) -> None:
        self._window.append(text)

    def push_tool_result(self, tool: str, content: str) -> None:
        self._window.append(f"[{tool}] {content}")

    def next_turn(self) -> BackendTurn:
        if self._cursor >= len(self._turns):
            raise TranscriptMismatch(
                f"transcript {self._path} exhausted after {self._cursor} turns but the session wants more"
            )
        spec = self._turns[self._cursor]
        self._cursor += 1
        expect = spec.get("expect")
        window = "\n".join(self._window)
        self._window = []
        if expect and expect not in window:
            raise TranscriptMismatch(
                f"transcript {self._path} turn {self._cursor}: expected {expect!r} "
                f"in the pending context, got: {window[:400]!r}"
            )
        calls = tuple(
            ToolRequest(tool=item["tool"], args=dict(item.get("args", {})))
            for item in spec.get("tool_calls", [])
        )
        return BackendTurn(
            thinking=spec.get("thinking"),
            tool_calls=calls,
            final=spec.get("final"),
        )


class HttpChatBackend:
    """Minimal chat-completion client with tool-call structures.

    Credentials come from the environment only; the request/response shape is
    the common ``/chat/completions`` one so any compatible endpoint works.
    """

    def __init__(
        self,
        ref: BackendRef,
        system_prompt: str,
        tool_names: tuple[str, ...],
        transport=None,
        timeout: float = 120.0,
    ):
        import httpx

        api_key = os.environ.get(ref.api_key_env, "")
        if not api_key:
            raise BackendUnavailable(
                f"http-chat backend requires the {ref.api_key_env} environment variable"
            )
        self._model = ref.model
        self._messages: list[dict] = [{"role": "system", "content": system_prompt}]
        self._tools = [
            {
                "type": "function",
                "function": {
                    "name": name,
                    "description": f"pocforge tool '{name}'",
                    "parameters": {"type": "object", "additionalProperties": True},
                },
            }
            for name in tool_names
        ]
        self._pending_call_ids: list[str] = []
        self._client = httpx.Client(
            base_url=ref.location.rstrip("/"),
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout,
            transport=transport,
        )

    def push_prompt(self, text: str) -> None:
        self._messages.append({"role": "user", "content": text})

    def push_tool_result(self, tool: str, content: str) -> None:
        call_id = self._pending_call_ids.pop(0) if self._pending_call_ids else tool
        self._messages.append({"role": "tool", "tool_call_id": call_id, "content": content})

    def next_turn(self) -> BackendTurn:
        import httpx

        payload = {"model": self._model, "messages": self._messages}
        if self._tools:
            payload["tools"] = self._tools
        try:
            response = self._client.post("/chat/completions", json=payload)
            response.raise_for_status()
            data = response.json()
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f"chat endpoint failed: {exc}") from exc

        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError) as exc:
            raise BackendUnavailable(f"malformed chat response: {data!r}") from exc
        self._messages.append(message)

        raw_calls = message.get("tool_calls") or []
        calls = []
        for item in raw_calls:
            fn = item.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"raw": fn.get("arguments")}
            calls.append(ToolRequest(tool=fn.get("name", ""), args=args))
            self._pending_call_ids.append(item.get("id", fn.get("name", "")))

        content = message.get("content")
        if calls:
            return BackendTurn(thinking=content or None, tool_calls=tuple(calls), final=None)
        return BackendTurn(thinking=None, tool_calls=(), final=content or "")


def make_backend(
    ref: BackendRef,
    *,
    system_prompt: str = "",
    tool_names: tuple[str, ...] = (),
    transport=None,
):
    if ref.kind == "scripted":
        backend = ScriptedBackend(ref.location)
        if system_prompt:
            backend.push_prompt(system_prompt)
        return backend
    return HttpChatBackend(ref, system_prompt, tool_names, transport=transport)
