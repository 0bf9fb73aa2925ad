"""Prompt -> validated group/policy.

Stages per round: structured generation, schema validation (with a repair
loop quoting the validator error), an actor-critic semantic check (one
repair round), then attribute/conflict validation against the store.
Accepted artifacts are returned, never committed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from ..engine import Conflict, PolicyStore, detect_conflicts, known_attribute_values
from ..model import (
    DEFAULT_REGISTRY,
    AccessPolicy,
    AttributeRegistry,
    GroupSpec,
    PolicyError,
    SchemaError,
    parse_policy_document,
)
from .backends import BackendError, LlmBackend
from .render import render_policy_text

ACCEPTED = "accepted"
REJECTED = "rejected-needs-user"
BACKEND_ERROR = "backend-error"
FEWSHOT_VERSION = "v1"

_NAME_ENTRY = {
    "type": "object",
    "properties": {"name": {"type": "string"}},
    "required": ["name"],
    "additionalProperties": False,
}

GROUP_SCHEMA: dict[str, Any] = {
    "title": "group",
    "type": "object",
    "properties": {
        "groups": {
            "type": "array",
            "minItems": 1,
            "maxItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "spec": {
                        "type": "object",
                        "properties": {
                            "attributes": {
                                "type": "object",
                                "additionalProperties": {
                                    "type": "object",
                                    "properties": {
                                        "includes": {"type": "array", "items": _NAME_ENTRY},
                                        "excludes": {"type": "array", "items": _NAME_ENTRY},
                                    },
                                    "additionalProperties": False,
                                },
                            }
                        },
                        "required": ["attributes"],
                        "additionalProperties": False,
                    },
                },
                "required": ["name", "spec"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["groups"],
    "additionalProperties": False,
}

POLICY_SCHEMA: dict[str, Any] = {
    "title": "policy",
    "type": "object",
    "properties": {
        "policies": {
            "type": "array",
            "minItems": 1,
            "maxItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "source": {"type": "string"},
                    "destination": {"type": "string"},
                    "ttl": {"type": "number"},
                    "capability": {
                        "type": "object",
                        "properties": {
                            "includes": {
                                "type": "array",
                                "items": {
                                    "type": "object",
                                    "properties": {"name": {"type": "string"}, "limit": {"type": "string"}},
                                    "required": ["name"],
                                    "additionalProperties": False,
                                },
                            },
                            "excludes": {"type": "array", "items": _NAME_ENTRY},
                        },
                        "additionalProperties": False,
                    },
                },
                "required": ["name", "source", "destination", "capability"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["policies"],
    "additionalProperties": False,
}

VERDICT_SCHEMA: dict[str, Any] = {
    "title": "verdict",
    "type": "object",
    "properties": {"verdict": {"type": "string", "enum": ["yes", "no"]}, "reason": {"type": "string"}},
    "required": ["verdict", "reason"],
    "additionalProperties": False,
}

SCHEMAS = {"group": GROUP_SCHEMA, "policy": POLICY_SCHEMA}


def load_fewshot(name: str, version: str = FEWSHOT_VERSION) -> str:
    return resources.files(__package__).joinpath("fewshot", f"{name}_{version}.txt").read_text(encoding="utf-8")


class UnparseableVerdict(ValueError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    kind: str
    context: str | None = None
    max_repair_rounds: int = 3

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise ValueError("prompt must be non-empty")
        if self.kind not in SCHEMAS:
            raise ValueError(f"kind must be one of {sorted(SCHEMAS)}")
        if self.max_repair_rounds < 1:
            raise ValueError("max_repair_rounds must be >= 1")


@dataclass(frozen=True)
class TranscriptEntry:
    stage: str
    verdict: str
    detail: str
    round: int

    def to_dict(self) -> dict[str, Any]:
        return {"stage": self.stage, "verdict": self.verdict, "detail": self.detail, "round": self.round}


@dataclass
class PipelineOutcome:
    status: str
    artifact: GroupSpec | AccessPolicy | None = None
    transcript: list[TranscriptEntry] = field(default_factory=list)
    conflicts: list = field(default_factory=list)

    def transcript_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.transcript], sort_keys=True, indent=1)


@dataclass(frozen=True)
class CriticResult:
    verdict: str
    explanation: str

    @property
    def match(self) -> bool:
        return self.verdict == "match"


_VERDICT_RE = re.compile(r"^\s*\W*(yes|no)\b\W*(.*)$", re.IGNORECASE | re.DOTALL)


def parse_verdict(reply: str) -> CriticResult:
    try:
        data = json.loads(reply)
    except (json.JSONDecodeError, TypeError):
        data = None
    if isinstance(data, dict):
        raw = data.get("verdict", data.get("same"))
        reason = str(data.get("reason", data.get("explanation", ""))).strip()
        if raw is True or (isinstance(raw, str) and raw.strip().lower() in ("yes", "match", "true")):
            return CriticResult("match", reason)
        if raw is False or (isinstance(raw, str) and raw.strip().lower() in ("no", "mismatch", "false")):
            return CriticResult("mismatch", reason)
        raise UnparseableVerdict(reply)
    m = _VERDICT_RE.match(reply or "")
    if not m:
        raise UnparseableVerdict(reply)
    return CriticResult("match" if m.group(1).lower() == "yes" else "mismatch", m.group(2).strip())


def critic_check(original_prompt: str, rendered: str, backend: LlmBackend) -> CriticResult:
    """Ask the backend whether ``rendered`` means what ``original_prompt`` asked.

    An unparseable reply counts as a mismatch. Backend failures propagate.
    """
    if not original_prompt.strip() or not rendered.strip():
        raise ValueError("critic needs two non-empty texts")
    user = (
        f"Request: {' '.join(original_prompt.split())}\n"
        f"Configuration: {' '.join(rendered.split())}\n"
        "Do they hold the same semantics?"
    )
    reply = backend.complete(load_fewshot("critic"), user, VERDICT_SCHEMA)
    try:
        return parse_verdict(reply)
    except UnparseableVerdict:
        return CriticResult("mismatch", f"unparseable critic reply: {reply!r}")


def _store_context(kind: str, store: PolicyStore) -> str:
    lines = ["", "Current system:"]
    values = known_attribute_values(store)
    for attr in sorted(values):
        lines.append(f"- attribute {attr}: {', '.join(sorted(values[attr]))}")
    if store.groups:
        lines.append(f"- groups: {', '.join(sorted(store.groups))}")
    if kind == "policy":
        caps = sorted({c for d in store.natives() for c in d.capabilities})
        if caps:
            lines.append(f"- capabilities: {', '.join(caps)}")
    return "\n".join(lines) + "\n"


def _extract(doc, kind: str):
    items, others = (doc.groups, doc.policies) if kind == "group" else (doc.policies, doc.groups)
    if len(items) != 1 or others:
        raise SchemaError(f"expected exactly one {kind} and nothing else", "groups" if kind == "group" else "policies")
    return items[0]


def generate(req: GenerationRequest, backend: LlmBackend, store: PolicyStore,
             registry: AttributeRegistry | None = DEFAULT_REGISTRY) -> PipelineOutcome:
    schema = SCHEMAS[req.kind]
    system = (req.context if req.context is not None else load_fewshot(req.kind)) + _store_context(req.kind, store)
    out = PipelineOutcome(status=REJECTED)
    log = out.transcript
    feedback = ""
    semantic_repaired = False

    for rnd in range(1, req.max_repair_rounds + 1):
        user = req.prompt + feedback
        try:
            text = backend.complete(system, user, schema)
        except BackendError as exc:
            log.append(TranscriptEntry("generate", "error", str(exc), rnd))
            out.status = BACKEND_ERROR
            return out
        log.append(TranscriptEntry("generate", "ok", f"{len(text)} chars", rnd))

        try:
            artifact = _extract(parse_policy_document(text, registry=None), req.kind)
        except PolicyError as exc:
            log.append(TranscriptEntry("schema", "fail", str(exc), rnd))
            feedback = (
                f"\n\nYour previous reply was rejected by the validator: {exc}\n"
                f"Previous reply:\n{text}\nReturn a corrected document."
            )
            continue
        log.append(TranscriptEntry("schema", "pass", "", rnd))

        rendered = render_policy_text(artifact)
        try:
            verdict = critic_check(req.prompt, rendered, backend)
        except BackendError as exc:
            log.append(TranscriptEntry("semantic", "error", str(exc), rnd))
            out.status = BACKEND_ERROR
            return out
        log.append(TranscriptEntry("semantic", verdict.verdict, verdict.explanation, rnd))
        if not verdict.match:
            if semantic_repaired:
                return out
            semantic_repaired = True
            feedback = (
                f"\n\nYour previous reply was rendered as: {rendered}\n"
                f"A reviewer found it does not match the request: {verdict.explanation}\n"
                "Return a corrected document."
            )
            continue

        conflicts = detect_conflicts(artifact, store, registry)
        if req.kind == "group" and registry is not None:
            conflicts += [
                Conflict("unknown-attribute", "error", f"attribute {attr!r} is not registered")
                for attr in artifact.constraints if not registry.knows(attr)
            ]
        if conflicts:
            out.conflicts = conflicts
            detail = "; ".join(f"{c.kind}({c.severity}): {c.detail}" for c in conflicts)
            log.append(TranscriptEntry("attribute", "fail", detail, rnd))
            return out
        log.append(TranscriptEntry("attribute", "pass", "", rnd))
        out.status = ACCEPTED
        out.artifact = artifact
        return out
    return out

