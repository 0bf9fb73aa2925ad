"""Model backends: an HTTP chat-completions client and deterministic mocks."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import httpx


class BackendError(Exception):
    pass


class LlmBackend(Protocol):
    def complete(self, system: str, user: str, schema: Mapping[str, Any]) -> str: ...


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0

    @classmethod
    def from_env(cls, defaults: Mapping[str, Any] | None = None) -> "EndpointConfig":
        d = dict(defaults or {})
        url = os.environ.get("COLLABIOT_LLM_URL", d.get("base_url") or d.get("url"))
        model = os.environ.get("COLLABIOT_LLM_MODEL", d.get("model"))
        if not url or not model:
            raise BackendError("set COLLABIOT_LLM_URL and COLLABIOT_LLM_MODEL (or the llm config section)")
        return cls(
            base_url=url,
            model=model,
            api_key=os.environ.get("COLLABIOT_LLM_KEY", d.get("api_key")),
            timeout=float(d.get("timeout", 60.0)),
        )


class HttpChatBackend:
    """POSTs ``{model, messages, format, response_format}`` to a chat endpoint.

    The JSON schema goes both in ``format`` (Ollama) and in
    ``response_format`` (OpenAI-style); servers ignore the one they do not know.
    """

    def __init__(self, config: EndpointConfig, client: httpx.Client | None = None):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)

    def request_body(self, system: str, user: str, schema: Mapping[str, Any]) -> dict[str, Any]:
        return {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "format": dict(schema),
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": schema.get("title", "output"), "schema": dict(schema)},
            },
            "stream": False,
        }

    def complete(self, system: str, user: str, schema: Mapping[str, Any]) -> str:
        headers = {"Authorization": f"Bearer {self.config.api_key}"} if self.config.api_key else {}
        try:
            resp = self._client.post(self.config.base_url, json=self.request_body(system, user, schema),
                                     headers=headers)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise BackendError(f"model endpoint failed: {exc}") from exc
        return extract_text(data)


def extract_text(data: Any) -> str:
    """Pull the generated text out of the common response shapes."""
    try:
        if "choices" in data:
            return data["choices"][0]["message"]["content"]
        if "message" in data:
            return data["message"]["content"]
        if "response" in data:
            return data["response"]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"unexpected response shape: {exc}") from exc
    raise BackendError("response carries no generated text")


class ScriptedBackend:
    """Replays a fixed list of replies, one per call, and records every call.

    Dict replies are sent as JSON. Running out of replies is a backend error.
    """

    def __init__(self, replies: Sequence[Any]):
        self._replies = list(replies)
        self.calls: list[dict[str, Any]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        replies = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(replies, list):
            raise ValueError("a script is a JSON list of replies")
        return cls(replies)

    def complete(self, system: str, user: str, schema: Mapping[str, Any]) -> str:
        self.calls.append({"system": system, "user": user, "schema": schema.get("title")})
        idx = len(self.calls) - 1
        if idx >= len(self._replies):
            raise BackendError(f"script exhausted after {len(self._replies)} replies")
        reply = self._replies[idx]
        if isinstance(reply, dict) and reply.get("error"):
            raise BackendError(str(reply["error"]))
        return reply if isinstance(reply, str) else json.dumps(reply)


_REQ_RE = re.compile(r"^Request: (.*)$", re.MULTILINE)
_CFG_RE = re.compile(r"^Configuration: (.*)$", re.MULTILINE)


class EchoBackend:
    """Critic stand-in that says "yes" exactly when the two texts are identical.

    For generation calls it echoes the user message back.
    """

    def complete(self, system: str, user: str, schema: Mapping[str, Any]) -> str:
        if schema.get("title") != "verdict":
            return user
        req, cfg = _REQ_RE.search(user), _CFG_RE.search(user)
        if req and cfg and " ".join(req.group(1).split()) == " ".join(cfg.group(1).split()):
            return json.dumps({"verdict": "yes", "reason": "identical"})
        return json.dumps({"verdict": "no", "reason": "texts differ"})
