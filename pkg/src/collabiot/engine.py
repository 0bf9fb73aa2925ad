"""Device and policy store, group matching, grant resolution, invalidation.

A :class:`PolicyStore` is an immutable snapshot. Mutations go through
:func:`apply_change`, which returns a new snapshot plus the set of
(guest, native) pairs whose grants shrank. :class:`PolicyEngine` wraps a
store with a single writer and an optional on-disk journal.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .model import (
    AccessPolicy,
    AttributeRegistry,
    GroupSpec,
    Limit,
    PolicyDocument,
    SchemaError,
    document_to_dict,
    group_to_dict,
    load_yaml,
    more_permissive,
    parse_policy_document,
    policy_to_dict,
    validate_capability_name,
)

log = logging.getLogger(__name__)

NATIVE = "native"
GUEST = "guest"


class ConflictError(Exception):
    """A mutation references an undefined group or collides with an existing name."""


class UnknownDevice(LookupError):
    pass


@dataclass(frozen=True)
class DeviceRecord:
    id: str
    attributes: Mapping[str, str]
    capabilities: frozenset[str] = frozenset()
    address: str | None = None
    kind: str = NATIVE

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise ValueError("device id must be a non-empty string")
        if self.kind not in (NATIVE, GUEST):
            raise ValueError(f"device kind must be native or guest, not {self.kind!r}")
        attrs = {}
        for k, v in self.attributes.items():
            k, v = str(k).strip().lower(), str(v).strip().lower()
            if not k or not v:
                raise ValueError("attribute names and values must be non-empty")
            if k in attrs:
                raise ValueError(f"duplicate attribute {k!r}")
            attrs[k] = v
        caps = frozenset(validate_capability_name(c) for c in self.capabilities)
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "capabilities", caps)
        if self.kind == NATIVE and not self.address:
            raise ValueError(f"native device {self.id!r} needs a proxy address")
        dtype = attrs.get("type")
        if dtype is not None:
            bad = [c for c in caps if c.split("_", 1)[0] != dtype]
            if bad:
                raise ValueError(f"capabilities {sorted(bad)} do not match device type {dtype!r}")

    @property
    def device_type(self) -> str | None:
        return self.attributes.get("type")

    def with_attributes(self, **updates: str) -> "DeviceRecord":
        return replace(self, attributes={**self.attributes, **updates})

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "kind": self.kind, "attributes": dict(self.attributes)}
        if self.capabilities:
            out["capabilities"] = sorted(self.capabilities)
        if self.address:
            out["address"] = self.address
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DeviceRecord":
        return cls(
            id=str(data["id"]),
            attributes=data.get("attributes") or {},
            capabilities=frozenset(data.get("capabilities") or ()),
            address=data.get("address"),
            kind=data.get("kind", NATIVE),
        )


@dataclass(frozen=True)
class AccessGrant:
    guest: str
    native: str
    capabilities: Mapping[str, Limit | None]
    expires_at: float


@dataclass(frozen=True)
class PolicyStore:
    groups: Mapping[str, GroupSpec] = field(default_factory=dict)
    policies: Mapping[str, AccessPolicy] = field(default_factory=dict)
    devices: Mapping[str, DeviceRecord] = field(default_factory=dict)
    revision: int = 0

    @classmethod
    def from_document(cls, doc: PolicyDocument, devices: Iterable[DeviceRecord] = ()) -> "PolicyStore":
        store = cls(
            groups={g.name: g for g in doc.groups},
            policies={p.name: p for p in doc.policies},
            devices={d.id: d for d in devices},
        )
        for p in doc.policies:
            _check_refs(p, store.groups)
        return store

    def natives(self) -> list[DeviceRecord]:
        return [d for d in self.devices.values() if d.kind == NATIVE]

    def guests(self) -> list[DeviceRecord]:
        return [d for d in self.devices.values() if d.kind == GUEST]

    def document(self) -> PolicyDocument:
        return PolicyDocument(tuple(self.groups.values()), tuple(self.policies.values()))


def match_groups(device: DeviceRecord, store: PolicyStore) -> frozenset[str]:
    return frozenset(name for name, g in store.groups.items() if g.matches(device.attributes))


def resolve_access(guest: DeviceRecord, store: PolicyStore, now: float) -> list[AccessGrant]:
    """Merge every policy whose destination group matches ``guest``.

    Capabilities are unioned per native device; include-policies contribute
    only the listed capabilities the device actually exposes, exclude-policies
    contribute the device's capabilities minus the excluded names. Colliding
    limits resolve to the most permissive one. Expiry uses the shortest ttl
    among contributing policies.
    """
    guest_groups = match_groups(guest, store)
    caps_by_native: dict[str, dict[str, Limit | None]] = {}
    ttl_by_native: dict[str, float] = {}
    members: dict[str, list[DeviceRecord]] = {}
    for policy in store.policies.values():
        if policy.destination not in guest_groups:
            continue
        source = store.groups.get(policy.source)
        if source is None:
            continue
        if policy.source not in members:
            members[policy.source] = [
                d for d in store.devices.values()
                if d.kind == NATIVE and d.id != guest.id and source.matches(d.attributes)
            ]
        for dev in members[policy.source]:
            if policy.includes is not None:
                contributed = {e.name: e.limit for e in policy.includes if e.name in dev.capabilities}
            else:
                excluded = set(policy.excludes or ())
                contributed = {c: None for c in dev.capabilities if c not in excluded}
            if not contributed:
                continue
            merged = caps_by_native.setdefault(dev.id, {})
            for cap, limit in contributed.items():
                merged[cap] = more_permissive(merged[cap], limit) if cap in merged else limit
            ttl = policy.effective_ttl
            ttl_by_native[dev.id] = min(ttl, ttl_by_native.get(dev.id, ttl))
    return [
        AccessGrant(
            guest=guest.id,
            native=nid,
            capabilities=dict(sorted(caps_by_native[nid].items())),
            expires_at=now + ttl_by_native[nid],
        )
        for nid in sorted(caps_by_native)
    ]


# -- mutations ---------------------------------------------------------------


@dataclass(frozen=True)
class Mutation:
    """``action`` is add/remove/update; ``target`` is group/policy/device.

    For add and update the payload is the object itself; for remove it is
    the name (or device id).
    """

    action: str
    target: str
    payload: Any

    @property
    def op(self) -> str:
        return f"{self.action}_{self.target}"

    def payload_dict(self) -> dict[str, Any]:
        if self.action == "remove":
            return {"name": self.payload}
        if self.target == "group":
            return group_to_dict(self.payload)
        if self.target == "policy":
            return policy_to_dict(self.payload)
        return self.payload.to_dict()

    @classmethod
    def from_journal(cls, op: str, payload: Mapping[str, Any]) -> "Mutation":
        action, target = op.split("_", 1)
        if action == "remove":
            return cls(action, target, payload["name"])
        if target == "group":
            obj = parse_policy_document({"groups": [payload]}, registry=None).groups[0]
        elif target == "policy":
            obj = parse_policy_document({"policies": [payload]}, registry=None).policies[0]
        else:
            obj = DeviceRecord.from_dict(payload)
        return cls(action, target, obj)


@dataclass(frozen=True)
class ChangeResult:
    store: PolicyStore
    invalidated: frozenset[tuple[str, str]]

    @property
    def revision(self) -> int:
        return self.store.revision


def _check_refs(policy: AccessPolicy, groups: Mapping[str, GroupSpec]):
    for ref in (policy.source, policy.destination):
        if ref not in groups:
            raise ConflictError(f"policy {policy.name!r} references undefined group {ref!r}")


def _mutate(store: PolicyStore, m: Mutation) -> PolicyStore:
    groups, policies, devices = dict(store.groups), dict(store.policies), dict(store.devices)
    if m.target == "group":
        if m.action == "add":
            if m.payload.name in groups:
                raise ConflictError(f"group {m.payload.name!r} already exists")
            groups[m.payload.name] = m.payload
        elif m.action == "update":
            if m.payload.name not in groups:
                raise ConflictError(f"no group named {m.payload.name!r}")
            groups[m.payload.name] = m.payload
        elif m.action == "remove":
            if m.payload not in groups:
                raise ConflictError(f"no group named {m.payload!r}")
            users = sorted(p.name for p in policies.values() if m.payload in (p.source, p.destination))
            if users:
                raise ConflictError(f"group {m.payload!r} is referenced by {users}")
            del groups[m.payload]
        else:
            raise ValueError(f"unknown action {m.action!r}")
    elif m.target == "policy":
        if m.action in ("add", "update"):
            exists = m.payload.name in policies
            if m.action == "add" and exists:
                raise ConflictError(f"policy {m.payload.name!r} already exists")
            if m.action == "update" and not exists:
                raise ConflictError(f"no policy named {m.payload.name!r}")
            _check_refs(m.payload, groups)
            policies[m.payload.name] = m.payload
        elif m.action == "remove":
            if m.payload not in policies:
                raise ConflictError(f"no policy named {m.payload!r}")
            del policies[m.payload]
        else:
            raise ValueError(f"unknown action {m.action!r}")
    elif m.target == "device":
        if m.action == "add":
            if m.payload.id in devices:
                raise ConflictError(f"device {m.payload.id!r} already registered")
            devices[m.payload.id] = m.payload
        elif m.action == "update":
            if m.payload.id not in devices:
                raise UnknownDevice(m.payload.id)
            devices[m.payload.id] = m.payload
        elif m.action == "remove":
            if m.payload not in devices:
                raise UnknownDevice(m.payload)
            del devices[m.payload]
        else:
            raise ValueError(f"unknown action {m.action!r}")
    else:
        raise ValueError(f"unknown mutation target {m.target!r}")
    return PolicyStore(groups, policies, devices, store.revision + 1)


def grant_map(store: PolicyStore, now: float = 0.0) -> dict[tuple[str, str], Mapping[str, Limit | None]]:
    """All current grants keyed by (guest, native)."""
    out = {}
    for guest in store.guests():
        for g in resolve_access(guest, store, now):
            out[(g.guest, g.native)] = g.capabilities
    return out


def _shrank(before: Mapping[str, Limit | None], after: Mapping[str, Limit | None] | None) -> bool:
    if after is None:
        return True
    for cap, limit in before.items():
        if cap not in after:
            return True
        new = after[cap]
        if new is not None and (limit is None or new.permissiveness() < limit.permissiveness()):
            return True
    return False


def diff_invalidated(before: PolicyStore, after: PolicyStore) -> frozenset[tuple[str, str]]:
    old, new = grant_map(before), grant_map(after)
    return frozenset(pair for pair, caps in old.items() if _shrank(caps, new.get(pair)))


def apply_change(store: PolicyStore, mutation: Mutation) -> ChangeResult:
    new_store = _mutate(store, mutation)
    return ChangeResult(new_store, diff_invalidated(store, new_store))


# -- conflict detection ------------------------------------------------------


@dataclass(frozen=True)
class Conflict:
    kind: str
    severity: str
    detail: str

    @property
    def hard(self) -> bool:
        return self.severity == "error"


def known_attribute_values(store: PolicyStore) -> dict[str, set[str]]:
    seen: dict[str, set[str]] = {}
    for dev in store.devices.values():
        for k, v in dev.attributes.items():
            seen.setdefault(k, set()).add(v)
    return seen


def detect_conflicts(
    candidate: AccessPolicy | GroupSpec,
    store: PolicyStore,
    registry: AttributeRegistry | None = None,
) -> list[Conflict]:
    """Report configuration problems a candidate would introduce.

    Hard conflicts (``severity="error"``): duplicate-name, dangling-reference,
    unknown-capability. Attribute names/values unseen in the device registry
    are ``warning`` severity.
    """
    out: list[Conflict] = []
    if isinstance(candidate, GroupSpec):
        if candidate.name in store.groups:
            out.append(Conflict("duplicate-name", "error", f"group {candidate.name!r} already exists"))
        seen = known_attribute_values(store)
        for attr, c in candidate.constraints.items():
            declared = registry is not None and registry.knows(attr)
            if attr not in seen and not declared:
                out.append(Conflict("unknown-attribute", "warning", f"no device has attribute {attr!r}"))
                continue
            for value in (c.includes or ()) + (c.excludes or ()):
                if value in seen.get(attr, ()):
                    continue
                if registry is not None and registry.knows_value(attr, value):
                    continue
                out.append(Conflict(
                    "unknown-attribute-value", "warning",
                    f"no device has {attr}={value}",
                ))
        return out

    if candidate.name in store.policies:
        out.append(Conflict("duplicate-name", "error", f"policy {candidate.name!r} already exists"))
    for role in ("source", "destination"):
        ref = getattr(candidate, role)
        if ref not in store.groups:
            out.append(Conflict("dangling-reference", "error", f"{role} group {ref!r} is not defined"))
    source = store.groups.get(candidate.source)
    if source is not None:
        available: set[str] = set()
        for dev in store.natives():
            if source.matches(dev.attributes):
                available |= dev.capabilities
        names = [e.name for e in candidate.includes] if candidate.includes else []
        for name in names:
            if name not in available:
                out.append(Conflict(
                    "unknown-capability", "error",
                    f"no device in group {candidate.source!r} offers {name!r}",
                ))
    return out


# -- persistence -------------------------------------------------------------


def store_to_snapshot(store: PolicyStore) -> str:
    body = document_to_dict(store.document())
    body["devices"] = [d.to_dict() for d in store.devices.values()]
    body["revision"] = store.revision
    return yaml.safe_dump(body, sort_keys=False)


def store_from_snapshot(text: str) -> PolicyStore:
    raw = load_yaml(text) or {}
    if not isinstance(raw, dict):
        raise SchemaError("snapshot must be a mapping")
    raw = dict(raw)
    devices = [DeviceRecord.from_dict(d) for d in raw.pop("devices", None) or ()]
    revision = int(raw.pop("revision", 0) or 0)
    doc = parse_policy_document(raw, registry=None)
    return replace(PolicyStore.from_document(doc, devices), revision=revision)


class PolicyEngine:
    """Single-writer holder of the current store snapshot.

    When ``path`` is given it is a directory holding ``snapshot.yaml`` and an
    append-only ``journal.jsonl``; every ``snapshot_every`` mutations the
    journal is folded into a fresh snapshot.
    """

    SNAPSHOT = "snapshot.yaml"
    JOURNAL = "journal.jsonl"

    def __init__(self, store: PolicyStore | None = None, path: str | os.PathLike | None = None,
                 snapshot_every: int = 50, clock=time.time):
        self._lock = threading.Lock()
        self._clock = clock
        self.path = Path(path) if path is not None else None
        self.snapshot_every = snapshot_every
        self._since_snapshot = 0
        if store is None and self.path is not None:
            store = self._load()
        self._store = store or PolicyStore()

    @property
    def store(self) -> PolicyStore:
        return self._store

    def apply(self, mutation: Mutation) -> ChangeResult:
        with self._lock:
            result = apply_change(self._store, mutation)
            self._store = result.store
            if self.path is not None:
                self._append(mutation, result.revision)
            return result

    def _append(self, mutation: Mutation, revision: int):
        self.path.mkdir(parents=True, exist_ok=True)
        entry = {
            "revision": revision,
            "op": mutation.op,
            "payload": mutation.payload_dict(),
            "timestamp": self._clock(),
        }
        with open(self.path / self.JOURNAL, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._since_snapshot += 1
        if self._since_snapshot >= self.snapshot_every:
            self._write_snapshot()

    def _write_snapshot(self):
        self.path.mkdir(parents=True, exist_ok=True)
        tmp = self.path / (self.SNAPSHOT + ".tmp")
        tmp.write_text(store_to_snapshot(self._store), encoding="utf-8")
        os.replace(tmp, self.path / self.SNAPSHOT)
        (self.path / self.JOURNAL).write_text("", encoding="utf-8")
        self._since_snapshot = 0

    def flush(self):
        if self.path is not None:
            with self._lock:
                self._write_snapshot()

    def _load(self) -> PolicyStore:
        snap = self.path / self.SNAPSHOT
        store = store_from_snapshot(snap.read_text(encoding="utf-8")) if snap.exists() else PolicyStore()
        journal = self.path / self.JOURNAL
        if journal.exists():
            for line in journal.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                if entry["revision"] <= store.revision:
                    continue
                store = _mutate(store, Mutation.from_journal(entry["op"], entry["payload"]))
                self._since_snapshot += 1
        return store
