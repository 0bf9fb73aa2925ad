"""Policy language data model: groups, access policies, limits.

Documents are YAML with two top-level keys, ``groups`` and ``policies``.
Attribute names, attribute values and capability names are case-normalized
to lowercase at parse time; group and policy names are kept verbatim.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import yaml

__all__ = [
    "AttributeConstraint",
    "AttributeRegistry",
    "AccessPolicy",
    "CapabilityEntry",
    "DEFAULT_REGISTRY",
    "DEFAULT_TTL",
    "GroupSpec",
    "Limit",
    "PolicyDocument",
    "PolicyError",
    "PolicySyntaxError",
    "SchemaError",
    "UnknownAttributeWarning",
    "parse_limit",
    "parse_policy_document",
    "serialize_policy_document",
    "validate_capability_name",
]

DEFAULT_TTL = 24 * 3600

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")
_TOKEN_RE = re.compile(r"^[a-z0-9][a-z0-9_.:\-]*$")
_CAPABILITY_RE = re.compile(r"^[a-z0-9]+_[a-z0-9]+$")
_RATE_RE = re.compile(
    r"^\s*(\d+(?:\.\d+)?)\s*(?:req|reqs|requests?)\s*/\s*(s|sec|second|m|min|minute)\s*$",
    re.IGNORECASE,
)
_USES_RE = re.compile(r"^\s*(\d+)\s*(?:uses?|times)\s*$", re.IGNORECASE)
_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(s|m|h|d)?\s*$", re.IGNORECASE)
_DURATION_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


class PolicyError(Exception):
    """Base class for policy document errors. ``path`` locates the fault."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


class PolicySyntaxError(PolicyError):
    """The document is not well-formed YAML."""


class SchemaError(PolicyError):
    """Unknown key, wrong type, or a violated model invariant."""


class UnknownAttributeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AttributeRegistry:
    """Known attribute names, optionally with a closed vocabulary of values."""

    names: frozenset[str]
    values: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def knows(self, name: str) -> bool:
        return name in self.names

    def knows_value(self, name: str, value: str) -> bool:
        vocab = self.values.get(name)
        return vocab is not None and value in vocab


DEFAULT_REGISTRY = AttributeRegistry(
    names=frozenset(
        {
            "location",
            "type",
            "relation",
            "owner",
            "sens-level",
            "id",
            "status",
            "manufacturer",
            "battery",
            "role",
            "event",
        }
    )
)


@dataclass(frozen=True)
class Limit:
    """A per-capability limit: a token-bucket rate or a total use count."""

    kind: str
    rate: float | None = None
    burst: int | None = None
    count: int | None = None

    def __post_init__(self):
        if self.kind == "rate":
            if self.rate is None or not self.rate > 0 or not math.isfinite(self.rate):
                raise ValueError("rate limit needs a positive finite rate")
            if self.burst is None or self.burst < 1:
                raise ValueError("rate limit needs burst >= 1")
            if self.count is not None:
                raise ValueError("rate limit cannot carry a count")
        elif self.kind == "max-uses":
            if self.count is None or self.count < 1:
                raise ValueError("max-uses limit needs count >= 1")
            if self.rate is not None or self.burst is not None:
                raise ValueError("max-uses limit cannot carry rate/burst")
        else:
            raise ValueError(f"unknown limit kind {self.kind!r}")

    @classmethod
    def per_second(cls, rate: float, burst: int | None = None) -> "Limit":
        rate = float(rate)
        return cls("rate", rate=rate, burst=default_burst(rate) if burst is None else int(burst))

    @classmethod
    def max_uses(cls, count: int) -> "Limit":
        return cls("max-uses", count=int(count))

    def permissiveness(self) -> tuple:
        # rate limits rank above use counts: a rate never exhausts
        if self.kind == "rate":
            return (1, self.rate, self.burst)
        return (0, self.count, 0)

    def encode(self) -> dict[str, Any]:
        if self.kind == "rate":
            return {"rate": self.rate, "burst": self.burst}
        return {"max_uses": self.count}

    @classmethod
    def decode(cls, data: Mapping[str, Any]) -> "Limit":
        if "max_uses" in data:
            return cls.max_uses(data["max_uses"])
        return cls.per_second(data["rate"], data.get("burst"))

    def to_text(self) -> str:
        if self.kind == "max-uses":
            return f"{self.count} uses"
        return _format_rate(self.rate)


def default_burst(rate: float) -> int:
    """One second's worth of requests, at least one."""
    return max(1, math.ceil(rate - 1e-9))


def more_permissive(a: Limit | None, b: Limit | None) -> Limit | None:
    """Pick the more permissive of two limits; ``None`` means unlimited."""
    if a is None or b is None:
        return None
    return a if a.permissiveness() >= b.permissiveness() else b


def _format_rate(rate: float) -> str:
    if float(rate).is_integer():
        return f"{int(rate)} req/sec"
    per_min = round(rate * 60)
    if per_min / 60 == rate:
        return f"{per_min} req/min"
    return f"{rate!r} req/sec"


@dataclass(frozen=True)
class AttributeConstraint:
    includes: tuple[str, ...] | None = None
    excludes: tuple[str, ...] | None = None

    def admits(self, value: str | None) -> bool:
        if value is None:
            return False
        if self.includes is not None and value not in self.includes:
            return False
        if self.excludes is not None and value in self.excludes:
            return False
        return True


@dataclass(frozen=True)
class GroupSpec:
    name: str
    constraints: Mapping[str, AttributeConstraint]

    def matches(self, attributes: Mapping[str, str]) -> bool:
        # OR within a list, AND across attributes; missing attribute never matches
        return all(c.admits(attributes.get(a)) for a, c in self.constraints.items())


@dataclass(frozen=True)
class CapabilityEntry:
    name: str
    limit: Limit | None = None


@dataclass(frozen=True)
class AccessPolicy:
    """Links a native (source) group to a guest (destination) group."""

    name: str
    source: str
    destination: str
    includes: tuple[CapabilityEntry, ...] | None = None
    excludes: tuple[str, ...] | None = None
    ttl: float | None = None

    @property
    def effective_ttl(self) -> float:
        return DEFAULT_TTL if self.ttl is None else self.ttl


@dataclass(frozen=True)
class PolicyDocument:
    groups: tuple[GroupSpec, ...] = ()
    policies: tuple[AccessPolicy, ...] = ()


def validate_capability_name(value: Any, path: str = "") -> str:
    if not isinstance(value, str):
        raise SchemaError(f"capability name must be a string, got {type(value).__name__}", path)
    name = value.strip().lower()
    if not _CAPABILITY_RE.match(name):
        raise SchemaError(f"capability {value!r} is not of the form <device-type>_<action>", path)
    return name


# -- parsing -----------------------------------------------------------------


class _StrictLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise SchemaError(f"duplicate key {key!r} (line {key_node.start_mark.line + 1})")
        seen.add(key)
    return yaml.SafeLoader.construct_mapping(loader, node, deep=deep)


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _expect(value, kind, path, what):
    if not isinstance(value, kind):
        raise SchemaError(f"expected {what}, got {type(value).__name__}", path)
    return value


def _check_keys(mapping: Mapping, allowed: Iterable[str], required: Iterable[str], path: str):
    allowed = set(allowed)
    for key in mapping:
        if key not in allowed:
            raise SchemaError(f"unknown key {key!r}", f"{path}.{key}" if path else str(key))
    for key in required:
        if key not in mapping:
            raise SchemaError(f"missing required key {key!r}", f"{path}.{key}" if path else key)


def _identifier(value, path) -> str:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    _expect(value, str, path, "a string")
    if not _NAME_RE.match(value):
        raise SchemaError(f"invalid identifier {value!r}", path)
    return value


def _token(value, path) -> str:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = str(value)
    _expect(value, str, path, "a string")
    token = value.strip().lower()
    if not _TOKEN_RE.match(token):
        raise SchemaError(f"invalid attribute token {value!r}", path)
    return token


def _name_list(raw, path) -> tuple[str, ...]:
    _expect(raw, list, path, "a list")
    out: list[str] = []
    for i, item in enumerate(raw):
        ipath = f"{path}[{i}]"
        _expect(item, dict, ipath, "a mapping with a 'name' key")
        _check_keys(item, {"name"}, {"name"}, ipath)
        token = _token(item["name"], f"{ipath}.name")
        if token not in out:
            out.append(token)
    return tuple(out)


def parse_limit(raw: Any, path: str = "limit") -> Limit:
    """Parse ``"10 req/sec"``, ``"60 req/min"``, ``"2 uses"`` or a mapping form."""
    if isinstance(raw, str):
        m = _RATE_RE.match(raw)
        if m:
            rate = float(m.group(1))
            if m.group(2).lower().startswith("m"):
                rate /= 60.0
            if rate <= 0:
                raise SchemaError("rate must be positive", path)
            return Limit.per_second(rate)
        m = _USES_RE.match(raw)
        if m:
            count = int(m.group(1))
            if count < 1:
                raise SchemaError("use count must be positive", path)
            return Limit.max_uses(count)
        raise SchemaError(f"unrecognized limit {raw!r} (use 'N req/sec', 'N req/min' or 'N uses')", path)
    if isinstance(raw, dict):
        if "max-uses" in raw:
            _check_keys(raw, {"max-uses"}, (), path)
            count = raw["max-uses"]
            if not isinstance(count, int) or isinstance(count, bool) or count < 1:
                raise SchemaError("max-uses must be a positive integer", f"{path}.max-uses")
            return Limit.max_uses(count)
        _check_keys(raw, {"rate", "burst"}, {"rate"}, path)
        base = parse_limit(raw["rate"], f"{path}.rate")
        if base.kind != "rate":
            raise SchemaError("rate must be a request rate", f"{path}.rate")
        burst = raw.get("burst", base.burst)
        if not isinstance(burst, int) or isinstance(burst, bool) or burst < 1:
            raise SchemaError("burst must be a positive integer", f"{path}.burst")
        return Limit.per_second(base.rate, burst)
    raise SchemaError(f"expected a limit string or mapping, got {type(raw).__name__}", path)


def _parse_duration(raw, path) -> float:
    if isinstance(raw, bool):
        raise SchemaError("ttl must be a duration", path)
    if isinstance(raw, (int, float)):
        seconds = float(raw)
    elif isinstance(raw, str) and _DURATION_RE.match(raw):
        m = _DURATION_RE.match(raw)
        seconds = float(m.group(1)) * _DURATION_UNITS[(m.group(2) or "s").lower()]
    else:
        raise SchemaError(f"invalid duration {raw!r}", path)
    if not seconds > 0 or not math.isfinite(seconds):
        raise SchemaError("ttl must be positive", path)
    return seconds


def _parse_group(raw, path, registry: AttributeRegistry | None) -> GroupSpec:
    _expect(raw, dict, path, "a group mapping")
    _check_keys(raw, {"name", "spec"}, {"name", "spec"}, path)
    name = _identifier(raw["name"], f"{path}.name")
    spec = _expect(raw["spec"], dict, f"{path}.spec", "a mapping")
    _check_keys(spec, {"attributes"}, {"attributes"}, f"{path}.spec")
    attrs_path = f"{path}.spec.attributes"
    attrs = _expect(spec["attributes"], dict, attrs_path, "a mapping")
    if not attrs:
        raise SchemaError("a group needs at least one attribute constraint", attrs_path)
    constraints: dict[str, AttributeConstraint] = {}
    for raw_attr, raw_lists in attrs.items():
        apath = f"{attrs_path}.{raw_attr}"
        attr = _token(raw_attr, apath)
        if attr in constraints:
            raise SchemaError(f"duplicate attribute {attr!r}", apath)
        lists = _expect(raw_lists, dict, apath, "a mapping with includes/excludes")
        _check_keys(lists, {"includes", "excludes"}, (), apath)
        inc = _name_list(lists["includes"], f"{apath}.includes") if "includes" in lists else None
        exc = _name_list(lists["excludes"], f"{apath}.excludes") if "excludes" in lists else None
        if not inc and not exc:
            raise SchemaError("constraint needs a non-empty includes or excludes list", apath)
        both = set(inc or ()) & set(exc or ())
        if both:
            raise SchemaError(f"value(s) {sorted(both)} both included and excluded", apath)
        if registry is not None and not registry.knows(attr):
            warnings.warn(f"{apath}: unknown attribute name {attr!r}", UnknownAttributeWarning, stacklevel=4)
        constraints[attr] = AttributeConstraint(inc or None, exc or None)
    return GroupSpec(name, constraints)


def _parse_policy(raw, path) -> AccessPolicy:
    _expect(raw, dict, path, "a policy mapping")
    _check_keys(raw, {"name", "source", "destination", "capability", "ttl"},
                {"name", "source", "destination", "capability"}, path)
    name = _identifier(raw["name"], f"{path}.name")
    source = _identifier(raw["source"], f"{path}.source")
    destination = _identifier(raw["destination"], f"{path}.destination")
    if source == destination:
        raise SchemaError("source and destination must differ", f"{path}.destination")
    cpath = f"{path}.capability"
    cap = _expect(raw["capability"], dict, cpath, "a mapping")
    _check_keys(cap, {"includes", "excludes"}, (), cpath)
    has_inc, has_exc = bool(cap.get("includes")), bool(cap.get("excludes"))
    if has_inc == has_exc:
        raise SchemaError("exactly one of includes/excludes must be non-empty", cpath)
    includes = excludes = None
    if has_inc:
        entries: list[CapabilityEntry] = []
        seen: set[str] = set()
        for i, item in enumerate(_expect(cap["includes"], list, f"{cpath}.includes", "a list")):
            ipath = f"{cpath}.includes[{i}]"
            _expect(item, dict, ipath, "a mapping with a 'name' key")
            _check_keys(item, {"name", "limit"}, {"name"}, ipath)
            cname = validate_capability_name(item["name"], f"{ipath}.name")
            if cname in seen:
                raise SchemaError(f"capability {cname!r} listed twice", ipath)
            seen.add(cname)
            limit = parse_limit(item["limit"], f"{ipath}.limit") if item.get("limit") is not None else None
            entries.append(CapabilityEntry(cname, limit))
        includes = tuple(entries)
    else:
        names: list[str] = []
        for i, item in enumerate(_expect(cap["excludes"], list, f"{cpath}.excludes", "a list")):
            ipath = f"{cpath}.excludes[{i}]"
            _expect(item, dict, ipath, "a mapping with a 'name' key")
            if "limit" in item:
                raise SchemaError("limits are not allowed on excluded capabilities", f"{ipath}.limit")
            _check_keys(item, {"name"}, {"name"}, ipath)
            cname = validate_capability_name(item["name"], f"{ipath}.name")
            if cname not in names:
                names.append(cname)
        excludes = tuple(names)
    ttl = _parse_duration(raw["ttl"], f"{path}.ttl") if raw.get("ttl") is not None else None
    return AccessPolicy(name, source, destination, includes, excludes, ttl)


def load_yaml(text: str) -> Any:
    try:
        return yaml.load(text, Loader=_StrictLoader)
    except SchemaError:
        raise
    except yaml.YAMLError as exc:
        raise PolicySyntaxError(str(exc).replace("\n", " ")) from exc


def parse_policy_document(
    text: str | Mapping[str, Any], registry: AttributeRegistry | None = DEFAULT_REGISTRY
) -> PolicyDocument:
    """Parse and validate a policy document.

    ``text`` may also be an already-loaded mapping. Unknown attribute names
    (relative to ``registry``) only produce an :class:`UnknownAttributeWarning`.
    """
    raw = load_yaml(text) if isinstance(text, str) else text
    if raw is None:
        return PolicyDocument()
    _expect(raw, dict, "", "a mapping with 'groups' and/or 'policies'")
    _check_keys(raw, {"groups", "policies"}, (), "")
    groups: list[GroupSpec] = []
    for i, g in enumerate(_expect(raw.get("groups") or [], list, "groups", "a list")):
        group = _parse_group(g, f"groups[{i}]", registry)
        if any(x.name == group.name for x in groups):
            raise SchemaError(f"duplicate group name {group.name!r}", f"groups[{i}].name")
        groups.append(group)
    policies: list[AccessPolicy] = []
    for i, p in enumerate(_expect(raw.get("policies") or [], list, "policies", "a list")):
        policy = _parse_policy(p, f"policies[{i}]")
        if any(x.name == policy.name for x in policies):
            raise SchemaError(f"duplicate policy name {policy.name!r}", f"policies[{i}].name")
        policies.append(policy)
    return PolicyDocument(tuple(groups), tuple(policies))


# -- serialization -----------------------------------------------------------


def group_to_dict(group: GroupSpec) -> dict[str, Any]:
    attrs: dict[str, Any] = {}
    for attr, c in group.constraints.items():
        entry: dict[str, Any] = {}
        if c.includes:
            entry["includes"] = [{"name": v} for v in c.includes]
        if c.excludes:
            entry["excludes"] = [{"name": v} for v in c.excludes]
        attrs[attr] = entry
    return {"name": group.name, "spec": {"attributes": attrs}}


def limit_to_yaml(limit: Limit) -> Any:
    if limit.kind == "rate" and limit.burst != default_burst(limit.rate):
        return {"rate": limit.to_text(), "burst": limit.burst}
    return limit.to_text()


def policy_to_dict(policy: AccessPolicy) -> dict[str, Any]:
    out: dict[str, Any] = {
        "name": policy.name,
        "source": policy.source,
        "destination": policy.destination,
    }
    if policy.includes:
        items = []
        for e in policy.includes:
            item: dict[str, Any] = {"name": e.name}
            if e.limit is not None:
                item["limit"] = limit_to_yaml(e.limit)
            items.append(item)
        out["capability"] = {"includes": items}
    else:
        out["capability"] = {"excludes": [{"name": n} for n in policy.excludes or ()]}
    if policy.ttl is not None:
        out["ttl"] = int(policy.ttl) if float(policy.ttl).is_integer() else policy.ttl
    return out


def document_to_dict(doc: PolicyDocument) -> dict[str, Any]:
    return {
        "groups": [group_to_dict(g) for g in doc.groups],
        "policies": [policy_to_dict(p) for p in doc.policies],
    }


def serialize_policy_document(doc: PolicyDocument) -> str:
    return yaml.safe_dump(document_to_dict(doc), sort_keys=False, default_flow_style=False)
