"""Micro-benchmarks for the control plane and the proxy data path.

Each benchmark returns a :class:`BenchReport` whose metric names encode the
sweep point, e.g. ``resolve.groups.20`` or ``token.size.7``.
"""

from __future__ import annotations

import asyncio
import random
import time
from typing import Any, Callable

from ..engine import GUEST, DeviceRecord, PolicyEngine, PolicyStore, resolve_access
from ..model import AccessPolicy, AttributeConstraint, CapabilityEntry, GroupSpec, Limit
from ..proxy.adapters import StatusService, make_adapter
from ..proxy.proxy import DeviceProxy, RequestEnvelope
from ..proxy.scheduler import SchedulerPolicy
from ..rpc import HubClient, HubServer, ProxyClient, ProxyServer, RpcClient, _Server, response
from ..tokens import TokenService, generate_keypair
from .report import BenchReport, config_hash

NOW = 1_700_000_000.0
_VALUES = ("v0", "v1", "v2")


def _timed(fn: Callable[[], Any], repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1000.0)
    return out


# -- policy resolution ---------------------------------------------------------


def resolution_store(groups: int, attributes: int, devices: int = 10,
                     device_attributes: int = 7, seed: int = 0) -> tuple[PolicyStore, DeviceRecord]:
    """Synthetic store: ``groups`` groups of ``attributes`` constraints each.

    Constraints draw from a pool of ``max(attributes, device_attributes)``
    names with three-value domains; every group is the source of one policy
    aimed at the guest's group, so each group is evaluated against the guest
    and against the fleet.
    """
    rng = random.Random(seed)
    pool = [f"a{i}" for i in range(max(attributes, device_attributes))]

    def attrs():
        return {a: rng.choice(_VALUES) for a in pool[:device_attributes]}

    natives = [
        DeviceRecord(f"srv{i}", {**attrs(), "type": "server"}, frozenset({"server_status"}), f"10.0.0.{i}:9000")
        for i in range(devices)
    ]
    guest = DeviceRecord("guest", {**attrs(), "role": "player"}, kind=GUEST)
    gs = {"guests": GroupSpec("guests", {"role": AttributeConstraint(includes=("player",))})}
    ps = {}
    for g in range(groups):
        names = rng.sample(pool, attributes)
        gs[f"g{g}"] = GroupSpec(f"g{g}", {
            a: AttributeConstraint(includes=tuple(rng.sample(_VALUES, 2))) for a in names
        })
        ps[f"p{g}"] = AccessPolicy(f"p{g}", f"g{g}", "guests",
                                   includes=(CapabilityEntry("server_status", Limit.per_second(10)),))
    store = PolicyStore(groups=gs, policies=ps, devices={d.id: d for d in natives + [guest]})
    return store, guest


def bench_policy_resolution(groups=(1, 5, 10, 20, 50, 100), attributes=(1, 5, 10, 20, 30, 40, 50),
                            fixed_attributes: int = 10, fixed_groups: int = 50,
                            repeats: int = 20, seed: int = 0) -> BenchReport:
    params = locals()
    report = BenchReport("policy_resolution", config_hash(params))
    for n in groups:
        store, guest = resolution_store(n, fixed_attributes, seed=seed)
        resolve_access(guest, store, NOW)  # warm-up
        report.series(f"resolve.groups.{n}", "ms").samples = _timed(lambda: resolve_access(guest, store, NOW), repeats)
    for k in attributes:
        store, guest = resolution_store(fixed_groups, k, seed=seed)
        resolve_access(guest, store, NOW)
        report.series(f"resolve.attributes.{k}", "ms").samples = _timed(
            lambda: resolve_access(guest, store, NOW), repeats)
    report.extra["params"] = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
    return report


# -- token generation ----------------------------------------------------------


def bench_token_gen(capabilities=tuple(range(1, 21)), repeats: int = 50) -> BenchReport:
    params = locals()
    report = BenchReport("token_gen", config_hash(params))
    service = TokenService(generate_keypair())
    for k in capabilities:
        caps = {f"server_cap{i:02d}": (Limit.per_second(10) if i % 2 else None) for i in range(k)}
        service.mint("guest", "srv", caps, NOW, NOW + 3600)
        report.series(f"token.time.{k}", "ms").samples = _timed(
            lambda: service.mint("guest", "srv", caps, NOW, NOW + 3600), repeats)
        token, _ = service.mint("guest", "srv", caps, NOW, NOW + 3600)
        report.series(f"token.size.{k}", "bytes").add(len(token.encode()))
    report.extra["params"] = {"capabilities": list(capabilities), "repeats": repeats}
    return report


# -- proxy overhead --------------------------------------------------------------


class DirectServer(_Server):
    """The same adapter served over the same framing, with no access control."""

    def __init__(self, adapter, **kw):
        super().__init__(**kw)
        self.adapter = adapter

    async def handle(self, msg, send):
        method, args = msg.get("method"), msg.get("args") or {}
        delay = self.adapter.service_time(method, args)
        if delay > 0:
            await asyncio.sleep(delay)
        await send(response(msg.get("request_id"), "ok", result=self.adapter.execute(method, args)))


def _session_fixture(adapter, device_id: str = "srv", mode: str = "fcfs"):
    service = TokenService(generate_keypair())
    proxy = DeviceProxy(device_id, adapter, service.public_key, SchedulerPolicy(mode=mode))
    caps = {c: None for c in adapter.capabilities}
    return service, proxy, caps


def bench_admission(repeats: int = 2000) -> BenchReport:
    """In-process per-request proxy logic: session lookup, checks, limiter."""
    report = BenchReport("admission", config_hash({"repeats": repeats}))
    adapter = StatusService()
    service, proxy, caps = _session_fixture(adapter)
    caps["server_status"] = Limit.per_second(1e9)
    token, claims = service.mint("guest", "srv", caps, NOW, NOW + 3600)
    report.series("verify", "ms").samples = _timed(
        lambda: proxy.establish_session(token, NOW, invalid_list={}), min(repeats, 200))
    env = RequestEnvelope(method="get_status", args={})
    t = [NOW]

    def admit():
        t[0] += 1e-6
        if not proxy.authorize_and_admit(claims.jti, env, t[0]):
            raise RuntimeError("admission unexpectedly denied")

    report.series("admit", "ms").samples = _timed(admit, repeats)
    return report


async def _measure(client_call, repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        reply = await client_call()
        if reply.get("status") != "ok":
            raise RuntimeError(f"request failed: {reply}")
        out.append((time.perf_counter() - t0) * 1000.0)
    return out


async def _proxy_overhead(methods, repeats, process_time):
    report = BenchReport("proxy_overhead", config_hash([methods, repeats, process_time]))
    direct = DirectServer(StatusService(process_time=process_time))
    adapter = StatusService(process_time=process_time)
    service, proxy, caps = _session_fixture(adapter)
    token, _ = service.mint("guest", "srv", caps, time.time(), time.time() + 3600)
    async with direct, ProxyServer(proxy) as pserver:
        dc = await RpcClient.connect(direct.address)
        pc = await ProxyClient.connect(pserver.address)
        try:
            await pc.establish(token)
            for m in methods:
                await dc.call({"kind": "request", "method": m})
                await pc.request(m)
                report.series(f"direct.{m}", "ms").samples = await _measure(lambda: dc.call({"kind": "request", "method": m}), repeats)
                report.series(f"proxy.{m}", "ms").samples = await _measure(lambda: pc.request(m), repeats)
        finally:
            await dc.close()
            await pc.close()
    return report


def bench_proxy_overhead(methods=("get_status", "load_image", "process_image"), repeats: int = 100,
                         process_time: float = 0.02) -> BenchReport:
    report = asyncio.run(_proxy_overhead(tuple(methods), repeats, process_time))
    admission = bench_admission()
    for name, series in admission.metrics.items():
        report.series(f"access.{name}", series.unit).samples = series.samples
    report.extra["params"] = {"methods": list(methods), "repeats": repeats, "process_time": process_time}
    return report


# -- onboarding ------------------------------------------------------------------


def onboarding_fixture(devices: int = 10) -> tuple[PolicyEngine, TokenService]:
    kinds = ["lock", "bulb", "camera", "laptop", "server"]
    fleet = []
    for i in range(devices):
        kind = kinds[i % len(kinds)]
        adapter = make_adapter(kind)
        fleet.append(DeviceRecord(f"{kind}{i}", {"type": adapter.device_type, "location": "home"},
                                  adapter.capabilities, f"127.0.0.1:{9000 + i}"))
    home = GroupSpec("home", {"location": AttributeConstraint(includes=("home",))})
    friends = GroupSpec("friends", {"relation": AttributeConstraint(includes=("friend",))})
    policy = AccessPolicy("friends-home", "home", "friends", excludes=("lock_setconf",))
    store = PolicyStore(groups={"home": home, "friends": friends}, policies={policy.name: policy},
                        devices={d.id: d for d in fleet})
    return PolicyEngine(store), TokenService(generate_keypair())


async def _onboarding(devices, repeats):
    report = BenchReport("onboarding", config_hash([devices, repeats]))
    engine, service = onboarding_fixture(devices)
    async with HubServer(engine, service) as hub:
        for i in range(repeats + 1):
            t0 = time.perf_counter()
            client = await HubClient.connect(hub.address)
            try:
                reply = await client.join(f"guest{i}", attributes={"relation": "friend"})
            finally:
                await client.close()
            elapsed = (time.perf_counter() - t0) * 1000.0
            if reply["status"] != "ok" or len(reply["result"]["entries"]) != devices:
                raise RuntimeError(f"join failed: {reply}")
            if i:  # first join warms imports and the event loop
                report.series("join", "ms").add(elapsed)
        report.series("join.server", "ms").samples = [1000.0 * x for x in hub.join_latencies[1:]]
    return report


def bench_onboarding(devices: int = 10, repeats: int = 20) -> BenchReport:
    """Connect, authenticate, resolve, mint and receive one token per device."""
    report = asyncio.run(_onboarding(devices, repeats))
    report.extra["params"] = {"devices": devices, "repeats": repeats}
    return report


# -- concurrency -----------------------------------------------------------------


async def _concurrency(guests, requests, service_time):
    report = BenchReport("concurrency", config_hash([guests, requests, service_time]))
    errors = 0
    for n in guests:
        adapter = StatusService(service_times={"get_status": service_time})
        service, proxy, caps = _session_fixture(adapter, mode="none")
        async with ProxyServer(proxy) as server:
            clients = []
            for g in range(n):
                c = await ProxyClient.connect(server.address)
                token, _ = service.mint(f"guest{g}", "srv", caps, time.time(), time.time() + 3600)
                reply = await c.establish(token)
                if reply["status"] != "ok":
                    raise RuntimeError(f"establish failed: {reply}")
                clients.append(c)
            latencies: list[float] = []

            async def loop(c):
                nonlocal errors
                for _ in range(requests):
                    t0 = time.perf_counter()
                    reply = await c.request("get_status")
                    latencies.append((time.perf_counter() - t0) * 1000.0)
                    if reply["status"] != "ok":
                        errors += 1

            await asyncio.gather(*(loop(c) for c in clients))
            for c in clients:
                await c.close()
        report.series(f"latency.guests.{n}", "ms").samples = latencies
    report.counts["issued"] = len(guests) and sum(n * requests for n in guests)
    report.counts["errored"] = errors
    report.counts["admitted"] = report.counts["issued"] - errors
    return report


def bench_concurrency(guests=(1, 5, 10, 20, 50), requests: int = 20, service_time: float = 0.005) -> BenchReport:
    report = asyncio.run(_concurrency(tuple(guests), requests, service_time))
    report.extra["params"] = {"guests": list(guests), "requests": requests, "service_time": service_time}
    return report


BENCHMARKS: dict[str, Callable[..., BenchReport]] = {
    "policy_resolution": bench_policy_resolution,
    "token_gen": bench_token_gen,
    "proxy_overhead": bench_proxy_overhead,
    "admission": bench_admission,
    "onboarding": bench_onboarding,
    "concurrency": bench_concurrency,
}


def run_microbench(kind: str, **params: Any) -> BenchReport:
    try:
        fn = BENCHMARKS[kind]
    except KeyError:
        raise ValueError(f"unknown benchmark {kind!r}; known: {sorted(BENCHMARKS)}") from None
    return fn(**params)


def summarize(report: BenchReport) -> list[str]:
    return [f"{m.name:32s} n={m.count:5d} mean={m.mean:9.3f} p50={m.p50:9.3f} p99={m.p99:9.3f} {m.unit}"
            for m in report.metrics.values()]


__all__ = ["BENCHMARKS", "run_microbench", "summarize", "resolution_store", "DirectServer",
           "onboarding_fixture"]
