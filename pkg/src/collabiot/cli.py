"""``collabiot`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``--json`` makes
every command print one machine-readable JSON document.

Store mutations run against the store directory directly, or through a
running hub's admin channel when ``--hub`` is given (the hub then delivers
invalidation notices to live proxies).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import signal
import ssl
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import yaml

from .engine import (
    GUEST,
    NATIVE,
    ConflictError,
    DeviceRecord,
    Mutation,
    PolicyEngine,
    PolicyStore,
    UnknownDevice,
    store_from_snapshot,
)
from .harness import BenchReport, SetupError, load_scenario, run_microbench, run_scenario, summarize
from .hub import ConfigError, HubConfig, load_config
from .llm import (
    ACCEPTED,
    BackendError,
    EndpointConfig,
    GenerationRequest,
    HttpChatBackend,
    ScriptedBackend,
    generate,
)
from .model import (
    PolicyDocument,
    PolicyError,
    group_to_dict,
    parse_policy_document,
    policy_to_dict,
    serialize_policy_document,
)
from .proxy import DeviceProxy
from .proxy.adapters import make_adapter
from .rpc import HubServer, ProxyServer, admin_message, parse_address, rpc_deliver, self_signed_tls, send_oneshot
from .tokens import AcceptAll, TokenService, load_private_key
from .workflow import apply_mutation

log = logging.getLogger("collabiot")


class UsageError(Exception):
    pass


class CommandError(Exception):
    pass


# -- output ------------------------------------------------------------------


@dataclass
class Output:
    json_mode: bool

    def emit(self, data: Any, text: str | Callable[[], str]) -> None:
        if self.json_mode:
            print(json.dumps(data, indent=1, sort_keys=True, default=str))
        else:
            print(text() if callable(text) else text)


# -- store access ----------------------------------------------------------------


class LocalStore:
    """Mutations applied straight to the store directory."""

    def __init__(self, config: HubConfig):
        self.config = config
        self.engine = PolicyEngine(path=config.store)
        self.tokens = TokenService(load_private_key(config.key_path, create=True), clock_skew=config.clock_skew)

    def store(self) -> PolicyStore:
        return self.engine.store

    def mutate(self, mutation: Mutation) -> dict[str, Any]:
        deliver = rpc_deliver(_client_tls(self.config))
        return apply_mutation(self.engine, self.tokens, mutation, time.time(), deliver=deliver)


class RemoteStore:
    """Mutations sent to a running hub, signed with the issuer key."""

    def __init__(self, config: HubConfig, address: str):
        self.config = config
        self.address = address
        self.key = load_private_key(config.key_path)

    def _call(self, op: str, payload: dict[str, Any] | None) -> dict[str, Any]:
        try:
            reply = send_oneshot(self.address, admin_message(op, payload, self.key), timeout=30.0,
                                 ssl_context=_client_tls(self.config))
        except OSError as exc:
            raise CommandError(f"hub at {self.address} unreachable: {exc}") from exc
        if reply.get("status") != "ok":
            if reply.get("error_type") == "UnknownDevice":
                raise UnknownDevice(reply.get("reason"))
            raise CommandError(reply.get("reason", "admin request failed"))
        return reply["result"]

    def store(self) -> PolicyStore:
        return store_from_snapshot(self._call("snapshot", None)["snapshot"])

    def mutate(self, mutation: Mutation) -> dict[str, Any]:
        return self._call(mutation.op, mutation.payload_dict())


def _client_tls(config: HubConfig) -> ssl.SSLContext | None:
    if not config.tls:
        return None
    return ssl.create_default_context(cafile=str(Path(config.store) / "tls" / "cert.pem"))


def open_store(args, config: HubConfig):
    return RemoteStore(config, args.hub) if args.hub else LocalStore(config)


def _summary_text(summary: dict[str, Any]) -> str:
    lines = [f"{summary['op']} applied (revision {summary['revision']})",
             f"invalidated pairs: {len(summary['invalidated'])}"]
    lines += [f"  {g} -> {n}" for g, n in summary["invalidated"]]
    jtis = sum(len(n["jtis"]) for n in summary["notices"])
    lines.append(f"invalidation notices: {len(summary['notices'])} ({jtis} tokens)")
    for guest, entries in summary["reissued"].items():
        lines.append(f"reissued for {guest}: {', '.join(e['proxy_address'] for e in entries)}")
    return "\n".join(lines)


def _parse_pairs(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise UsageError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# -- commands --------------------------------------------------------------------


def cmd_prompt(args, config: HubConfig, out: Output) -> int:
    if not args.text or not args.text.strip():
        raise UsageError("prompt text must be non-empty")
    if args.script:
        backend = ScriptedBackend.from_file(args.script)
    else:
        backend = HttpChatBackend(EndpointConfig.from_env(config.llm))
    access = open_store(args, config)
    req = GenerationRequest(args.text, args.kind, max_repair_rounds=config.max_repair_rounds)
    outcome = generate(req, backend, access.store())
    artifact_yaml = None
    if outcome.artifact is not None:
        doc = (PolicyDocument(groups=(outcome.artifact,)) if args.kind == "group"
               else PolicyDocument(policies=(outcome.artifact,)))
        artifact_yaml = serialize_policy_document(doc)
    data: dict[str, Any] = {
        "status": outcome.status,
        "transcript": [e.to_dict() for e in outcome.transcript],
        "conflicts": [vars(c) for c in outcome.conflicts],
        "artifact": artifact_yaml,
    }
    lines = [f"[round {e.round}] {e.stage}: {e.verdict}" + (f" ({e.detail})" if e.detail else "")
             for e in outcome.transcript]
    lines.append(f"status: {outcome.status}")
    lines += [f"conflict {c.kind} ({c.severity}): {c.detail}" for c in outcome.conflicts]
    if artifact_yaml:
        lines.append(artifact_yaml.rstrip())
    if outcome.status == ACCEPTED and args.commit:
        summary = access.mutate(Mutation("add", args.kind, outcome.artifact))
        data["commit"] = summary
        lines.append(_summary_text(summary))
    out.emit(data, "\n".join(lines))
    return 0 if outcome.status == ACCEPTED else 1


def cmd_policy(args, config: HubConfig, out: Output) -> int:
    access = open_store(args, config)
    if args.action == "list":
        store = access.store()
        data = {"groups": sorted(store.groups), "policies": sorted(store.policies), "revision": store.revision}
        out.emit(data, lambda: "\n".join(
            [f"revision {store.revision}"]
            + [f"group  {g}" for g in sorted(store.groups)]
            + [f"policy {p.name}: {p.source} -> {p.destination}" for p in store.policies.values()]))
        return 0
    if args.action == "show":
        store = access.store()
        if args.name in store.policies:
            doc = PolicyDocument(policies=(store.policies[args.name],))
            data = policy_to_dict(store.policies[args.name])
        elif args.name in store.groups:
            doc = PolicyDocument(groups=(store.groups[args.name],))
            data = group_to_dict(store.groups[args.name])
        else:
            raise CommandError(f"no policy or group named {args.name!r}")
        out.emit(data, serialize_policy_document(doc).rstrip())
        return 0
    if args.action == "rm":
        target = "group" if args.group else "policy"
        summary = access.mutate(Mutation("remove", target, args.name))
        out.emit(summary, _summary_text(summary))
        return 0
    # load: every group first, then every policy
    doc = parse_policy_document(Path(args.file).read_text(encoding="utf-8"))
    results = [access.mutate(Mutation("add", "group", g)) for g in doc.groups]
    results += [access.mutate(Mutation("add", "policy", p)) for p in doc.policies]
    out.emit(results, "\n".join(_summary_text(r) for r in results) or "nothing to load")
    return 0


def cmd_device(args, config: HubConfig, out: Output) -> int:
    access = open_store(args, config)
    if args.action == "list":
        devices = sorted(access.store().devices.values(), key=lambda d: d.id)
        out.emit([d.to_dict() for d in devices], lambda: "\n".join(
            f"{d.id:16s} {d.kind:6s} {d.address or '-':22s} "
            + " ".join(f"{k}={v}" for k, v in sorted(d.attributes.items()))
            for d in devices) or "no devices")
        return 0
    if args.action == "remove":
        summary = access.mutate(Mutation("remove", "device", args.id))
    elif args.action == "tag":
        current = access.store().devices.get(args.id)
        if current is None:
            raise UnknownDevice(args.id)
        updated = current.with_attributes(**_parse_pairs(args.attributes))
        summary = access.mutate(Mutation("update", "device", updated))
    else:
        attrs = _parse_pairs(args.attributes)
        if args.native:
            if not args.address:
                raise UsageError("native devices need --address HOST:PORT")
            parse_address(args.address)
            caps = frozenset(c for c in (args.capabilities or "").split(",") if c)
            if not caps:
                kind = args.adapter or attrs.get("type")
                try:
                    caps = make_adapter(kind).capabilities
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"give --capabilities or a known --adapter: {exc}") from None
            record = DeviceRecord(args.id, attrs, caps, args.address, NATIVE)
        else:
            record = DeviceRecord(args.id, attrs, kind=GUEST)
        summary = access.mutate(Mutation("add", "device", record))
    out.emit(summary, _summary_text(summary))
    return 0


def _int_list(text: str) -> list[int]:
    """``1..20`` or ``1,5,10``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a range like 1..20 or a list like 1,5,10, got {text!r}") from None


def _emit_report(report, args, out: Output) -> None:
    path = report.write(args.results) if args.results else None
    data = report.to_dict(samples=False)
    if path:
        data["written_to"] = str(path)
    text = "\n".join([f"{report.name} {report.counts}"] + summarize(report)
                     + ([f"written to {path}"] if path else []))
    if args.csv and not out.json_mode:
        text = report.to_csv().rstrip()
    out.emit(data, text)


def cmd_scenario(args, config: HubConfig, out: Output) -> int:
    report = run_scenario(load_scenario(args.file), results_dir=args.results)
    args.results = None  # already written
    _emit_report(report, args, out)
    return 0


def cmd_bench(args, config: HubConfig, out: Output) -> int:
    if args.kind == "llm":
        return _bench_llm(args, config, out)
    params: dict[str, Any] = {}
    if args.repeats is not None:
        params["repeats"] = args.repeats
    if args.kind == "token_gen" and args.caps:
        params["capabilities"] = _int_list(args.caps)
    if args.kind == "policy_resolution":
        if args.groups:
            params["groups"] = _int_list(args.groups)
        if args.attributes:
            params["attributes"] = _int_list(args.attributes)
    if args.kind == "concurrency" and args.guests:
        params["guests"] = _int_list(args.guests)
        params.pop("repeats", None)
    limits = {"capabilities": 20, "groups": 100, "attributes": 50, "guests": 50}
    for key, cap in limits.items():
        if key in params and (min(params[key]) < 1 or max(params[key]) > cap):
            raise UsageError(f"{key} must lie in 1..{cap}")
    _emit_report(run_microbench(args.kind, **params), args, out)
    return 0


def _bench_llm(args, config: HubConfig, out: Output) -> int:
    if not args.prompts:
        raise UsageError("bench llm needs --prompts FILE")
    cases = yaml.safe_load(Path(args.prompts).read_text(encoding="utf-8")) or []
    backend = HttpChatBackend(EndpointConfig.from_env(config.llm))
    store = open_store(args, config).store()
    report = BenchReport("llm")
    correct = 0
    for case in cases:
        t0 = time.perf_counter()
        outcome = generate(GenerationRequest(case["prompt"], case["kind"],
                                             max_repair_rounds=config.max_repair_rounds), backend, store)
        report.series("generation", "s").add(time.perf_counter() - t0)
        report.series("rounds", "rounds").add(max((e.round for e in outcome.transcript), default=0))
        ok = outcome.status == ACCEPTED
        if ok and case.get("expect"):
            expected = parse_policy_document(case["expect"])
            ok = outcome.artifact in (expected.groups + expected.policies)
        correct += ok
        report.decisions.append(f"{case['kind']} {outcome.status} {'correct' if ok else 'wrong'}: {case['prompt']}")
    report.extra["accuracy"] = correct / len(cases) if cases else float("nan")
    report.decisions.append(f"accuracy {report.extra['accuracy']:.3f}")
    _emit_report(report, args, out)
    return 0


def cmd_serve(args, config: HubConfig, out: Output) -> int:
    asyncio.run(_serve(config, out))
    return 0


async def _serve(config: HubConfig, out: Output) -> None:
    engine = PolicyEngine(path=config.store)
    tokens = TokenService(load_private_key(config.key_path, create=True), authenticator=AcceptAll(),
                          clock_skew=config.clock_skew)
    server_tls = client_tls = None
    if config.tls:
        server_tls, client_tls = self_signed_tls(Path(config.store) / "tls", parse_address(config.listen)[0])
    host, port = parse_address(config.listen)
    servers = [HubServer(engine, tokens, deliver=rpc_deliver(client_tls), host=host, port=port,
                         ssl_context=server_tls)]
    for dev in engine.store.natives():
        try:
            adapter = make_adapter(dev.device_type)
        except (TypeError, ValueError):
            log.warning("no emulated adapter for %s (type %s); not serving it", dev.id, dev.device_type)
            continue
        phost, pport = parse_address(dev.address)
        proxy = DeviceProxy(dev.id, adapter, tokens.public_key, clock_skew=config.clock_skew)
        servers.append(ProxyServer(proxy, host=phost, port=pport, ssl_context=server_tls))
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    try:
        for s in servers:
            await s.start()
        out.emit({"hub": servers[0].address, "proxies": [s.address for s in servers[1:]]},
                 f"hub listening on {servers[0].address}; proxies: "
                 + (", ".join(s.address for s in servers[1:]) or "none"))
        sys.stdout.flush()
        await stop.wait()
    finally:
        for s in servers:
            await s.stop()
        engine.flush()


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collabiot", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="hub config YAML")
    p.add_argument("--store", help="policy store directory (overrides config)")
    p.add_argument("--hub", metavar="HOST:PORT", help="send mutations through a running hub")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the hub and a proxy per native device")
    s.add_argument("--listen", help="hub address HOST:PORT")
    s.add_argument("--tls", action="store_true", default=None, help="serve over TLS with a self-signed cert")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("prompt", help="generate a group or policy from text")
    s.add_argument("kind", choices=["group", "policy"])
    s.add_argument("text")
    s.add_argument("--commit", action="store_true", help="apply the accepted artifact to the store")
    s.add_argument("--script", help="JSON list of scripted model replies (offline backend)")
    s.set_defaults(func=cmd_prompt)

    s = sub.add_parser("policy", help="inspect and edit policies")
    ps = s.add_subparsers(dest="action", required=True)
    ps.add_parser("list")
    x = ps.add_parser("show")
    x.add_argument("name")
    x = ps.add_parser("rm")
    x.add_argument("name")
    x.add_argument("--group", action="store_true", help="remove a group instead of a policy")
    x = ps.add_parser("load", help="add every group and policy of a YAML document")
    x.add_argument("file")
    s.set_defaults(func=cmd_policy)

    s = sub.add_parser("device", help="register, tag and remove devices")
    ds = s.add_subparsers(dest="action", required=True)
    x = ds.add_parser("add")
    x.add_argument("id")
    x.add_argument("attributes", nargs="*", metavar="key=value")
    x.add_argument("--native", action="store_true")
    x.add_argument("--address", help="proxy address of a native device")
    x.add_argument("--adapter", help="adapter kind used to infer capabilities")
    x.add_argument("--capabilities", help="comma-separated capability names")
    x = ds.add_parser("tag")
    x.add_argument("id")
    x.add_argument("attributes", nargs="+", metavar="key=value")
    x = ds.add_parser("remove")
    x.add_argument("id")
    ds.add_parser("list")
    s.set_defaults(func=cmd_device)

    s = sub.add_parser("scenario", help="run a scenario file")
    ss = s.add_subparsers(dest="action", required=True)
    x = ss.add_parser("run")
    x.add_argument("file")
    x.add_argument("--results", help="write results/<name>/<stamp>/report.{json,csv} under this directory")
    x.add_argument("--csv", action="store_true", help="print the CSV summary")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("bench", help="run a micro-benchmark")
    s.add_argument("kind", choices=["policy_resolution", "token_gen", "proxy_overhead", "admission",
                                    "onboarding", "concurrency", "llm"])
    s.add_argument("--caps", help="capability counts, e.g. 1..20")
    s.add_argument("--groups", help="group counts, e.g. 1,20,100")
    s.add_argument("--attributes", help="attribute counts, e.g. 1..50")
    s.add_argument("--guests", help="guest counts, e.g. 1,5,10,20,50")
    s.add_argument("--repeats", type=int)
    s.add_argument("--prompts", help="YAML list of {kind, prompt, expect} for bench llm")
    s.add_argument("--results", help="also write report files under this directory")
    s.add_argument("--csv", action="store_true", help="print the CSV summary")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Output(args.json)
    try:
        config = load_config(args.config, store=args.store, listen=getattr(args, "listen", None),
                             tls=getattr(args, "tls", None))
        return args.func(args, config, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"collabiot: error: {exc}", file=sys.stderr)
        return 2
    except UnknownDevice as exc:
        print(f"collabiot: UnknownDevice: {exc}", file=sys.stderr)
        return 1
    except (CommandError, ConfigError, ConflictError, PolicyError, BackendError, OSError, ValueError) as exc:
        print(f"collabiot: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except SetupError as exc:
        print(f"collabiot: SetupError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
