"""Scenario files: fleet, guests, workloads, timed events.

See docs/scenario-format.md for the YAML layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..model import PolicyDocument, parse_policy_document
from ..proxy.adapters import make_adapter
from ..proxy.scheduler import SchedulerPolicy


class SetupError(Exception):
    pass


EVENT_KINDS = ("context", "remove-policy", "add-policies", "tag-device", "leave")


@dataclass(frozen=True)
class Workload:
    target: str
    method: str
    mode: str = "closed-loop"
    rate: float | None = None
    concurrency: int = 1
    think_time: float = 0.0
    priority: int = 10
    start: float = 0.0
    stop: float | None = None
    count: int | None = None
    args: Mapping[str, Any] | None = None
    min_backoff: float = 0.001

    def __post_init__(self):
        if self.mode not in ("closed-loop", "open-loop"):
            raise SetupError(f"workload mode must be closed-loop or open-loop, not {self.mode!r}")
        if self.concurrency < 1:
            raise SetupError("workload concurrency must be >= 1")
        if self.mode == "open-loop" and not (self.rate and self.rate > 0):
            raise SetupError("open-loop workloads need a positive rate")


@dataclass(frozen=True)
class GuestSpec:
    id: str
    attributes: Mapping[str, str]
    arrival: float = 0.0
    credential: Any = None
    workloads: tuple[Workload, ...] = ()


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    attributes: Mapping[str, str]
    adapter: Mapping[str, Any]
    scheduler: SchedulerPolicy = SchedulerPolicy()

    def build_adapter(self):
        config = dict(self.adapter)
        kind = config.pop("kind", self.attributes.get("type"))
        return make_adapter(kind, **config)


@dataclass(frozen=True)
class ScheduledEvent:
    at: float
    kind: str
    params: Mapping[str, Any]


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    policy: PolicyDocument
    fleet: tuple[DeviceSpec, ...] = ()
    guests: tuple[GuestSpec, ...] = ()
    events: tuple[ScheduledEvent, ...] = ()
    seed: int = 0
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def validate(self) -> "Scenario":
        ids = [d.id for d in self.fleet] + [g.id for g in self.guests]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise SetupError(f"duplicate device ids: {sorted(dupes)}")
        fleet = {d.id for d in self.fleet}
        if self.duration < 0:
            raise SetupError("duration must be non-negative")

        def in_range(t, what):
            if t is not None and not 0 <= t <= self.duration:
                raise SetupError(f"{what} at {t} is outside [0, {self.duration}]")

        for g in self.guests:
            in_range(g.arrival, f"guest {g.id} arrival")
            for w in g.workloads:
                if w.target not in fleet:
                    raise SetupError(f"guest {g.id} targets unknown device {w.target!r}")
                in_range(w.start, f"{g.id} workload start")
                in_range(w.stop, f"{g.id} workload stop")
        for e in self.events:
            if e.kind not in EVENT_KINDS:
                raise SetupError(f"unknown event kind {e.kind!r}; known: {list(EVENT_KINDS)}")
            in_range(e.at, f"event {e.kind}")
            dev = e.params.get("device")
            if dev is not None and dev not in fleet:
                raise SetupError(f"event {e.kind} names unknown device {dev!r}")
        for d in self.fleet:
            try:
                d.build_adapter()
            except (TypeError, ValueError) as exc:
                raise SetupError(f"device {d.id}: {exc}") from exc
        return self


def _expand(entries, what):
    """``replicas: n`` turns one template into ids <id>1..<id>n."""
    for entry in entries or ():
        if not isinstance(entry, dict) or "id" not in entry:
            raise SetupError(f"each {what} needs an id")
        n = int(entry.get("replicas", 1))
        if n == 1 and "replicas" not in entry:
            yield entry
            continue
        for i in range(1, n + 1):
            yield {**entry, "id": f"{entry['id']}{i}"}


def scenario_from_dict(raw: Mapping[str, Any], base_dir: str | Path = ".") -> Scenario:
    try:
        if "policy_file" in raw:
            text = (Path(base_dir) / raw["policy_file"]).read_text(encoding="utf-8")
        else:
            text = raw.get("policy") or ""
        policy = parse_policy_document(text)
        fleet = tuple(
            DeviceSpec(
                id=str(d["id"]),
                attributes={str(k): str(v) for k, v in (d.get("attributes") or {}).items()},
                adapter=d.get("adapter") or {},
                scheduler=SchedulerPolicy(**(d.get("scheduler") or {})),
            )
            for d in _expand(raw.get("fleet"), "fleet device")
        )
        guests = tuple(
            GuestSpec(
                id=str(g["id"]),
                attributes={str(k): str(v) for k, v in (g.get("attributes") or {}).items()},
                arrival=float(g.get("arrival", 0.0)),
                credential=g.get("credential"),
                workloads=tuple(Workload(**w) for w in g.get("workloads") or ()),
            )
            for g in _expand(raw.get("guests"), "guest")
        )
        events = tuple(
            sorted(
                (ScheduledEvent(float(e["at"]), str(e["kind"]),
                                {k: v for k, v in e.items() if k not in ("at", "kind")})
                 for e in raw.get("events") or ()),
                key=lambda e: e.at,
            )
        )
        return Scenario(
            name=str(raw.get("name", "scenario")),
            duration=float(raw.get("duration", 0.0)),
            policy=policy,
            fleet=fleet,
            guests=guests,
            events=events,
            seed=int(raw.get("seed", 0)),
            raw=dict(raw),
        ).validate()
    except SetupError:
        raise
    except Exception as exc:  # noqa: BLE001 - every malformed field is a setup problem
        raise SetupError(f"invalid scenario: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise SetupError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_dict(raw, path.parent)
