"""Virtual-time scenario runner.

The real control plane (policy engine, token service) and the real proxy
logic (session cache, admission, limiters, dispatch queue) run unchanged;
only time is simulated. Adapter service times advance a virtual clock, so
runs are fast and every admit/deny decision is reproducible.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from ..engine import GUEST, DeviceRecord, Mutation, PolicyEngine, PolicyStore
from ..model import parse_policy_document
from ..proxy.adapters import AdapterError, DeviceAdapter
from ..proxy.proxy import DeviceProxy, RequestEnvelope
from ..proxy.scheduler import DispatchQueue, QueueFull
from ..tokens import TokenService
from .report import BenchReport, config_hash
from .scenario import GuestSpec, Scenario, SetupError, Workload

log = logging.getLogger(__name__)

EPOCH = 1_700_000_000.0
_TERMINAL = {"capability", "method", "expired", "no-session", "no-token"}


@dataclass
class _Request:
    rid: str
    env: RequestEnvelope
    guest: "_Guest"
    workload: Workload
    loop: int
    issued_at: float


@dataclass
class _Device:
    id: str
    adapter: DeviceAdapter
    proxy: DeviceProxy
    queue: DispatchQueue
    busy: int = 0
    arrivals: list[tuple[float, str, int]] = field(default_factory=list)
    dispatched: list[tuple[float, str]] = field(default_factory=list)


@dataclass
class _Guest:
    spec: GuestSpec
    record: DeviceRecord
    jtis: dict[str, str] = field(default_factory=dict)
    issued: int = 0
    left: bool = False
    # (id(workload), loop) -> requests issued by that loop
    sent: dict[tuple[int, int], int] = field(default_factory=dict)


class _Run:
    def __init__(self, scenario: Scenario, repetition: int = 0):
        self.sc = scenario
        self.t = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        seed = hashlib.sha256(f"{scenario.name}:{scenario.seed}".encode()).digest()
        jti_seq = itertools.count(1)
        self.tokens = TokenService(
            Ed25519PrivateKey.from_private_bytes(seed),
            jti_factory=lambda: f"{scenario.name}-{next(jti_seq)}",
        )
        self.devices: dict[str, _Device] = {}
        natives = []
        for spec in scenario.fleet:
            adapter = spec.build_adapter()
            address = f"sim://{spec.id}"
            natives.append(DeviceRecord(spec.id, spec.attributes, adapter.capabilities, address))
            proxy = DeviceProxy(spec.id, adapter, self.tokens.public_key, spec.scheduler)
            self.devices[spec.id] = _Device(spec.id, adapter, proxy, DispatchQueue(spec.scheduler))
        try:
            store = PolicyStore.from_document(scenario.policy, natives)
        except Exception as exc:  # noqa: BLE001
            raise SetupError(str(exc)) from exc
        self.engine = PolicyEngine(store)
        self.by_address = {f"sim://{d}": dev for d, dev in self.devices.items()}
        self.guests: dict[str, _Guest] = {}
        self.outcomes: dict[str, str] = {}
        self.report = BenchReport(scenario.name, config_hash(dict(scenario.raw) or scenario.name), repetition)
        self.report.extra["seed"] = scenario.seed
        self.completions: dict[str, list[float]] = {}

    # -- event loop ----------------------------------------------------------

    @property
    def now(self) -> float:
        return EPOCH + self.t

    def at(self, t: float, fn: Callable, *args: Any) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def run(self) -> BenchReport:
        for g in self.sc.guests:
            self.at(g.arrival, self._arrive, g)
        for e in self.sc.events:
            self.at(e.at, self._event, e)
        try:
            while self._heap:
                t, _, fn, args = heapq.heappop(self._heap)
                if t > self.sc.duration:
                    break
                self.t = t
                fn(*args)
        except Exception as exc:
            self.report.extra["aborted"] = repr(exc)
            self._finish()
            raise
        self._finish()
        return self.report

    def _note(self, text: str) -> None:
        self.report.decisions.append(f"{self.t:.6f} {text}")

    # -- guests --------------------------------------------------------------

    def _arrive(self, spec: GuestSpec) -> None:
        record = DeviceRecord(spec.id, spec.attributes, kind=GUEST)
        guest = _Guest(spec, record)
        self.guests[spec.id] = guest
        self.engine.apply(Mutation("add", "device", record))
        self._join(guest)
        for w in spec.workloads:
            start = max(self.t, w.start)
            if w.mode == "closed-loop":
                for loop in range(w.concurrency):
                    self.at(start, self._issue, guest, w, loop)
            else:
                self.at(start, self._open_arrival, guest, w, 0)

    def _join(self, guest: _Guest) -> int:
        t0 = time.perf_counter()
        reply = self.tokens.join(
            {"device_id": guest.spec.id, "credential": guest.spec.credential,
             "attributes": dict(guest.record.attributes)},
            self.engine.store, self.now,
        )
        jtis = {}
        for entry in reply["entries"]:
            dev = self.by_address[entry["proxy_address"]]
            jtis[dev.id] = dev.proxy.establish_session(entry["token"], self.now).jti
        guest.jtis = jtis
        self.report.series("join.latency", "s").add(time.perf_counter() - t0)
        self.report.series("join.tokens", "tokens").add(len(reply["entries"]))
        self._note(f"join {guest.spec.id} tokens={','.join(sorted(guest.jtis))}")
        return len(reply["entries"])

    def _open_arrival(self, guest: _Guest, w: Workload, k: int) -> None:
        if self._stopped(guest, w, k):
            return
        self._issue(guest, w, 0, follow_up=False)
        self.at(self.t + 1.0 / w.rate, self._open_arrival, guest, w, k + 1)

    def _stopped(self, guest: _Guest, w: Workload, issued: int) -> bool:
        if guest.left:
            return True
        if w.stop is not None and self.t >= w.stop:
            return True
        return w.count is not None and issued >= w.count

    def _issue(self, guest: _Guest, w: Workload, loop: int, follow_up: bool = True) -> None:
        key = (id(w), loop)
        if follow_up and self._stopped(guest, w, guest.sent.get(key, 0)):
            return
        guest.sent[key] = guest.sent.get(key, 0) + 1
        dev = self.devices[w.target]
        guest.issued += 1
        rid = f"{guest.spec.id}#{guest.issued}"
        self.report.counts["issued"] += 1
        env = RequestEnvelope(method=w.method, args=dict(w.args or {}), priority=w.priority, request_id=rid)
        jti = guest.jtis.get(dev.id)
        if jti is None:
            self._deny(rid, "no-token", dev.id, w.method)
            return
        decision = dev.proxy.authorize_and_admit(jti, env, self.now)
        if not decision.admitted:
            self._deny(rid, decision.reason, dev.id, w.method)
            if not follow_up:
                return
            # an exhausted use counter has no retry_after, so that loop ends
            if decision.reason == "limit" and decision.retry_after is not None:
                self.at(self.t + max(decision.retry_after or 0.0, w.min_backoff), self._issue, guest, w, loop)
            elif decision.reason == "invalidated":
                guest.jtis.pop(dev.id, None)
                self._join(guest)
                if dev.id in guest.jtis:
                    self.at(self.t + w.min_backoff, self._issue, guest, w, loop)
            return
        self._note(f"{rid} {dev.id} {w.method} admit")
        self.outcomes[rid] = "admitted"
        req = _Request(rid, env, guest, w, loop if follow_up else -1, self.t)
        self._submit(dev, req)

    def _deny(self, rid: str, reason: str, dev_id: str, method: str) -> None:
        self._note(f"{rid} {dev_id} {method} deny:{reason}")
        self.outcomes[rid] = "denied"
        self.report.series("denied", "count").add(1)

    # -- devices -------------------------------------------------------------

    def _submit(self, dev: _Device, req: _Request) -> None:
        dev.arrivals.append((self.t, req.rid, req.env.priority))
        if dev.proxy.scheduler.mode == "none" or dev.busy < dev.adapter.parallelism:
            self._start(dev, req)
            return
        try:
            dev.queue.push(req, req.env.priority)
        except QueueFull:
            self._deny(req.rid, "queue-full", dev.id, req.env.method)

    def _start(self, dev: _Device, req: _Request) -> None:
        dev.busy += 1
        dev.dispatched.append((self.t, req.rid))
        self.at(self.t + dev.adapter.service_time(req.env.method, req.env.args), self._finish_request, dev, req)

    def _finish_request(self, dev: _Device, req: _Request) -> None:
        dev.busy -= 1
        try:
            dev.adapter.execute(req.env.method, req.env.args)
        except AdapterError as exc:
            self.outcomes[req.rid] = "errored"
            self._note(f"{req.rid} error:{exc}")
        else:
            gid = req.guest.spec.id
            self.report.series(f"latency.{gid}", "s").add(self.t - req.issued_at)
            self.completions.setdefault(gid, []).append(self.t)
        if len(dev.queue):
            self._start(dev, dev.queue.pop())
        if req.loop >= 0:
            self.at(self.t + req.workload.think_time, self._issue, req.guest, req.workload, req.loop)

    # -- scheduled events ----------------------------------------------------

    def _event(self, e) -> None:
        p = e.params
        if e.kind == "context":
            dev = self.devices[p["device"]]
            applied = dev.proxy.update_context_rate(p["signal"], p.get("overrides") or {}, self.now)
            self._note(f"context {p['signal'].get('context_name')} active={p['signal'].get('active', True)} "
                       f"applied={sorted(applied.items())}")
        elif e.kind == "remove-policy":
            self._mutate([Mutation("remove", "policy", p["name"])])
        elif e.kind == "add-policies":
            doc = parse_policy_document(p["document"])
            self._mutate([Mutation("add", "group", g) for g in doc.groups]
                         + [Mutation("add", "policy", x) for x in doc.policies], rejoin=True)
        elif e.kind == "tag-device":
            current = self.engine.store.devices[p["id"]]
            updated = current.with_attributes(**{str(k): str(v) for k, v in p["attributes"].items()})
            self._mutate([Mutation("update", "device", updated)], rejoin=True)
            if p["id"] in self.guests:
                self.guests[p["id"]].record = updated
        elif e.kind == "leave":
            self.guests[p["id"]].left = True
            self._note(f"leave {p['id']}")
        else:
            raise SetupError(f"unknown event kind {e.kind!r}")

    def _mutate(self, mutations, rejoin: bool = False) -> None:
        for m in mutations:
            before = self.engine.store
            change = self.engine.apply(m)

            def deliver(address, notice, signature):
                self.by_address[address].proxy.apply_invalidation(notice, self.now, signature)

            notices = self.tokens.issue_invalidation(change, before, self.now, deliver=deliver)
            jtis = sorted(j for n in notices for j in n.jtis)
            self._note(f"{m.op} {getattr(m.payload, 'name', m.payload)} rev={change.revision} "
                       f"invalidated={sorted(change.invalidated)} jtis={jtis}")
            self.report.extra.setdefault("invalidations", []).append(
                {"t": self.t, "op": m.op, "pairs": sorted(change.invalidated), "jtis": jtis}
            )
        if rejoin:
            for guest in self.guests.values():
                if not guest.left:
                    self._join(guest)

    # -- results -------------------------------------------------------------

    def _finish(self) -> None:
        counts = self.report.counts
        for outcome in self.outcomes.values():
            counts[outcome] += 1
        bins = max(1, int(self.sc.duration + 0.5))
        total = [0] * bins
        for gid in [g.id for g in self.sc.guests]:
            series = self.report.series(f"throughput.{gid}", "req/s")
            per = [0] * bins
            for t in self.completions.get(gid, ()):
                i = min(int(t), bins - 1)
                per[i] += 1
                total[i] += 1
            series.samples = [float(x) for x in per]
        self.report.series("throughput.total", "req/s").samples = [float(x) for x in total]
        self.report.extra["traces"] = {
            d.id: {"arrivals": d.arrivals, "dispatched": d.dispatched} for d in self.devices.values()
        }
        self.report.extra["adapters"] = {
            d.id: {k: v for k, v in vars(d.adapter).items()
                   if not k.startswith("_") and isinstance(v, (int, float, bool))}
            for d in self.devices.values()
        }


def run_scenario(scenario: Scenario, results_dir: str | Path | None = None,
                 repetition: int = 0) -> BenchReport:
    """Run a scenario in virtual time; optionally write report.json/report.csv."""
    runner = _Run(scenario, repetition)
    try:
        report = runner.run()
    finally:
        if results_dir is not None:
            runner.report.write(results_dir)
    return report
