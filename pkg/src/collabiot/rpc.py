"""Framed JSON RPC: 4-byte big-endian length prefix + UTF-8 JSON body.

Message kinds served by a device proxy: ``establish``, ``request``,
``invalidate``, ``context``; answered with ``response`` messages keyed by
``request_id``. The hub serves ``join``. Streamed results are sent as
several responses carrying ``chunk`` and ``more``.
"""

from __future__ import annotations

import asyncio
import datetime
import ipaddress
import itertools
import json
import logging
import socket
import ssl
import struct
import tempfile
import time
from pathlib import Path
from typing import Any, Callable, Mapping

from .engine import GUEST, ConflictError, DeviceRecord, Mutation, PolicyEngine, UnknownDevice, store_to_snapshot
from .model import PolicyError
from .proxy.adapters import AdapterError, Chunks
from .proxy.proxy import DeviceProxy, RequestEnvelope, UnknownCapability
from .proxy.scheduler import DispatchQueue, QueueFull
from .tokens import (
    AuthenticationError,
    Deliver,
    InvalidationNotice,
    TokenError,
    TokenService,
    sign_message,
    verify_message,
)
from .workflow import apply_mutation

log = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024
_HDR = struct.Struct(">I")
_ids = itertools.count(1)


class FrameError(Exception):
    pass


def encode_frame(msg: Mapping[str, Any]) -> bytes:
    body = json.dumps(msg, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HDR.pack(len(body)) + body


def decode_body(body: bytes) -> dict[str, Any]:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError("frame body is not UTF-8 JSON") from exc
    if not isinstance(msg, dict) or "kind" not in msg:
        raise FrameError("frame must be an object with a 'kind'")
    return msg


async def read_frame(reader: asyncio.StreamReader) -> dict[str, Any] | None:
    try:
        header = await reader.readexactly(_HDR.size)
    except asyncio.IncompleteReadError:
        return None
    (length,) = _HDR.unpack(header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return decode_body(await reader.readexactly(length))


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address {address!r} is not host:port")
    return host.strip("[]"), int(port)


def response(request_id: Any, status: str, **extra: Any) -> dict[str, Any]:
    msg = {"kind": "response", "request_id": request_id, "status": status}
    msg.update({k: v for k, v in extra.items() if v is not None})
    return msg


# -- admin messages ----------------------------------------------------------


def invalidate_message(notice: InvalidationNotice, signature: str) -> dict[str, Any]:
    return {"kind": "invalidate", "notice": notice.to_dict(), "issuer_signature": signature}


def admin_message(op: str, payload: Mapping[str, Any] | None, key) -> dict[str, Any]:
    body = {"op": op, "payload": dict(payload or {})}
    return {"kind": "admin", **body, "issuer_signature": sign_message(body, key)}


def context_message(signal: Mapping[str, Any], overrides: Mapping[str, float], key) -> dict[str, Any]:
    body = {"signal": dict(signal), "overrides": dict(overrides)}
    return {"kind": "context", **body, "issuer_signature": sign_message(body, key)}


# -- servers -----------------------------------------------------------------


class _Server:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, ssl_context: ssl.SSLContext | None = None,
                 clock: Callable[[], float] = time.time):
        self.host, self.port = host, port
        self.ssl_context = ssl_context
        self.clock = clock
        self._server: asyncio.AbstractServer | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self) -> "_Server":
        self._server = await asyncio.start_server(self._serve, self.host, self.port, ssl=self.ssl_context)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        lock = asyncio.Lock()

        async def send(msg):
            async with lock:
                writer.write(encode_frame(msg))
                await writer.drain()

        try:
            while True:
                try:
                    msg = await read_frame(reader)
                except FrameError as exc:
                    await send(response(None, "error", reason=f"bad-frame: {exc}"))
                    break
                if msg is None:
                    break
                await self.handle(msg, send)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, ssl.SSLError):
                pass

    async def handle(self, msg: dict[str, Any], send) -> None:
        raise NotImplementedError


class ProxyServer(_Server):
    """Serves one :class:`DeviceProxy` over framed RPC.

    Admission runs inline on the connection task; admitted requests are
    queued per the proxy's scheduler and executed by ``adapter.parallelism``
    workers, so admission never waits on the device.
    """

    def __init__(self, proxy: DeviceProxy, **kw):
        super().__init__(**kw)
        self.proxy = proxy
        self.queue = DispatchQueue(proxy.scheduler)
        self.dispatch_log: list[str] = []
        self._pending: asyncio.Semaphore | None = None
        self._workers: list[asyncio.Task] = []
        self._inline: set[asyncio.Task] = set()

    async def start(self):
        self._pending = asyncio.Semaphore(0)
        if self.proxy.scheduler.mode != "none":
            self._workers = [asyncio.create_task(self._worker()) for _ in range(self.proxy.adapter.parallelism)]
        return await super().start()

    async def stop(self):
        await super().stop()
        for t in self._workers + list(self._inline):
            t.cancel()
        await asyncio.gather(*self._workers, *self._inline, return_exceptions=True)
        self._workers = []

    async def handle(self, msg, send):
        kind = msg.get("kind")
        rid = msg.get("request_id")
        now = self.clock()
        if kind == "request":
            await self._on_request(msg, send, now)
        elif kind == "establish":
            try:
                session = self.proxy.establish_session(msg.get("token"), now)
            except TokenError as exc:
                await send(response(rid, "deny", reason=type(exc).__name__))
                return
            await send(response(rid, "ok", result={
                "jti": session.jti,
                "exp": session.claims.exp,
                "capabilities": sorted(session.limiters),
            }))
        elif kind == "invalidate":
            try:
                notice = InvalidationNotice.from_dict(msg["notice"])
                evicted = self.proxy.apply_invalidation(notice, now, msg.get("issuer_signature") or "")
            except (TokenError, KeyError, TypeError, ValueError) as exc:
                await send(response(rid, "error", reason=f"invalidate rejected: {exc}"))
                return
            await send(response(rid, "ok", result={"evicted": evicted}))
        elif kind == "context":
            body = {"signal": msg.get("signal"), "overrides": msg.get("overrides")}
            try:
                verify_message(body, msg.get("issuer_signature") or "", self.proxy.issuer_pubkey)
                applied = self.proxy.update_context_rate(body["signal"], body["overrides"] or {}, now)
            except (TokenError, UnknownCapability, KeyError, TypeError, ValueError) as exc:
                await send(response(rid, "error", reason=f"context rejected: {exc}"))
                return
            await send(response(rid, "ok", result={"applied": applied}))
        else:
            await send(response(rid, "error", reason=f"unknown message kind {kind!r}"))

    async def _on_request(self, msg, send, now):
        try:
            env = RequestEnvelope.from_wire(msg)
        except (KeyError, TypeError, ValueError) as exc:
            await send(response(msg.get("request_id"), "error", reason=f"bad request: {exc}"))
            return
        session = env.jti
        if session is None and env.token is not None:
            try:
                session = self.proxy.establish_session(env.token, now)
            except TokenError as exc:
                await send(response(env.request_id, "deny", reason=type(exc).__name__))
                return
        if session is None:
            await send(response(env.request_id, "deny", reason="no-session"))
            return
        decision = self.proxy.authorize_and_admit(session, env, now)
        if not decision.admitted:
            await send(response(env.request_id, "deny", reason=decision.reason, retry_after=decision.retry_after))
            return
        if self.proxy.scheduler.mode == "none":
            task = asyncio.create_task(self._run(env, send))
            self._inline.add(task)
            task.add_done_callback(self._inline.discard)
            return
        try:
            self.queue.push((env, send), env.priority)
        except QueueFull:
            await send(response(env.request_id, "deny", reason="queue-full"))
            return
        self._pending.release()

    async def _worker(self):
        while True:
            await self._pending.acquire()
            env, send = self.queue.pop()
            try:
                await self._run(env, send)
            except (ConnectionError, RuntimeError):
                pass

    async def _run(self, env: RequestEnvelope, send):
        adapter = self.proxy.adapter
        self.dispatch_log.append(env.request_id)
        delay = adapter.service_time(env.method, env.args)
        if delay > 0:
            await asyncio.sleep(delay)
        try:
            result = adapter.execute(env.method, env.args)
        except AdapterError as exc:
            await send(response(env.request_id, "error", reason=str(exc)))
            return
        if isinstance(result, Chunks):
            n = len(result.items)
            for i, item in enumerate(result.items):
                await send(response(env.request_id, "ok", result=item, chunk=i, more=i < n - 1))
        else:
            await send(response(env.request_id, "ok", result=result))


class HubServer(_Server):
    """Join endpoint of the control plane, plus issuer-signed admin mutations.

    Admin messages carry ``op`` (``snapshot`` or a journal op such as
    ``add_policy``) and ``payload``; mutations run off the event loop because
    invalidation delivery is blocking.
    """

    def __init__(self, engine: PolicyEngine, tokens: TokenService, deliver: Deliver | None = None, **kw):
        super().__init__(**kw)
        self.engine = engine
        self.tokens = tokens
        self.deliver = deliver if deliver is not None else rpc_deliver()
        self.join_latencies: list[float] = []

    async def handle(self, msg, send):
        rid = msg.get("request_id")
        kind = msg.get("kind")
        if kind == "admin":
            await self._on_admin(msg, send)
            return
        if kind != "join":
            await send(response(rid, "error", reason=f"unknown message kind {kind!r}"))
            return
        t0 = time.perf_counter()
        try:
            result = self.tokens.join(msg, self.engine.store, self.clock())
        except AuthenticationError as exc:
            await send(response(rid, "deny", reason=f"authentication failed: {exc}"))
            return
        except (TokenError, ValueError) as exc:
            await send(response(rid, "error", reason=str(exc)))
            return
        self._register(msg)
        self.join_latencies.append(time.perf_counter() - t0)
        log.info("join %s: %d tokens in %.2f ms", msg.get("device_id"), len(result["entries"]),
                 1000 * self.join_latencies[-1])
        await send(response(rid, "ok", result=result))

    def _register(self, msg) -> None:
        # a first-time guest enters the store so later changes can revoke its tokens
        device_id = msg["device_id"]
        if device_id in self.engine.store.devices:
            return
        record = DeviceRecord(device_id, msg.get("attributes") or {}, kind=GUEST)
        try:
            self.engine.apply(Mutation("add", "device", record))
        except ConflictError:
            pass  # registered concurrently

    async def _on_admin(self, msg, send):
        rid = msg.get("request_id")
        body = {"op": msg.get("op"), "payload": msg.get("payload")}
        try:
            verify_message(body, msg.get("issuer_signature") or "", self.tokens.public_key)
        except TokenError as exc:
            await send(response(rid, "deny", reason=f"admin signature rejected: {exc}"))
            return
        if body["op"] == "snapshot":
            await send(response(rid, "ok", result={"snapshot": store_to_snapshot(self.engine.store)}))
            return
        try:
            mutation = Mutation.from_journal(str(body["op"]), body["payload"] or {})
            summary = await asyncio.to_thread(
                apply_mutation, self.engine, self.tokens, mutation, self.clock(), self.deliver)
        except (ConflictError, UnknownDevice, PolicyError, KeyError, TypeError, ValueError) as exc:
            await send(response(rid, "error", reason=str(exc), error_type=type(exc).__name__))
            return
        await send(response(rid, "ok", result=summary))


# -- clients -----------------------------------------------------------------


class RpcClient:
    """Async client multiplexing requests over one connection."""

    def __init__(self):
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._pending: dict[Any, asyncio.Future] = {}
        self._chunks: dict[Any, list] = {}
        self._task: asyncio.Task | None = None

    @classmethod
    async def connect(cls, address: str, ssl_context: ssl.SSLContext | None = None) -> "RpcClient":
        self = cls()
        host, port = parse_address(address)
        self._reader, self._writer = await asyncio.open_connection(
            host, port, ssl=ssl_context, server_hostname=host if ssl_context else None
        )
        self._task = asyncio.create_task(self._read_loop())
        return self

    async def _read_loop(self):
        try:
            while True:
                msg = await read_frame(self._reader)
                if msg is None:
                    break
                rid = msg.get("request_id")
                if "chunk" in msg and msg.get("status") == "ok":
                    self._chunks.setdefault(rid, []).append(msg.get("result"))
                    if msg.get("more"):
                        continue
                    msg = dict(msg, result=self._chunks.pop(rid))
                fut = self._pending.pop(rid, None)
                if fut is not None and not fut.done():
                    fut.set_result(msg)
        except (ConnectionError, FrameError, asyncio.IncompleteReadError) as exc:
            err = exc
        else:
            err = ConnectionError("connection closed")
        for fut in self._pending.values():
            if not fut.done():
                fut.set_exception(err)
        self._pending.clear()

    async def call(self, msg: dict[str, Any], timeout: float | None = 30.0) -> dict[str, Any]:
        rid = msg.setdefault("request_id", f"c{next(_ids)}")
        fut = asyncio.get_running_loop().create_future()
        self._pending[rid] = fut
        self._writer.write(encode_frame(msg))
        await self._writer.drain()
        return await asyncio.wait_for(fut, timeout)

    async def close(self):
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, ssl.SSLError):
                pass
        if self._task is not None:
            await asyncio.gather(self._task, return_exceptions=True)

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()


class ProxyClient(RpcClient):
    async def establish(self, token: str) -> dict[str, Any]:
        reply = await self.call({"kind": "establish", "token": token})
        if reply["status"] == "ok":
            self.jti = reply["result"]["jti"]
        return reply

    async def request(self, method: str, args: Any = None, priority: int = 10,
                      capability: str | None = None, jti: str | None = None) -> dict[str, Any]:
        msg = {"kind": "request", "jti": jti or getattr(self, "jti", None), "method": method,
               "args": args, "priority": priority}
        if capability:
            msg["capability"] = capability
        return await self.call(msg)


class HubClient(RpcClient):
    async def join(self, device_id: str, credential: Any = None,
                   attributes: Mapping[str, str] | None = None) -> dict[str, Any]:
        return await self.call({
            "kind": "join", "device_id": device_id, "credential": credential,
            "attributes": dict(attributes or {}),
        })


def send_oneshot(address: str, msg: dict[str, Any], timeout: float = 5.0,
                 ssl_context: ssl.SSLContext | None = None) -> dict[str, Any]:
    """Blocking single request/response, usable from any thread."""
    host, port = parse_address(address)
    msg.setdefault("request_id", f"s{next(_ids)}")
    with socket.create_connection((host, port), timeout=timeout) as raw:
        sock = ssl_context.wrap_socket(raw, server_hostname=host) if ssl_context else raw
        sock.sendall(encode_frame(msg))
        header = _recv_exact(sock, _HDR.size)
        (length,) = _HDR.unpack(header)
        if length > MAX_FRAME:
            raise FrameError("oversized reply")
        return decode_body(_recv_exact(sock, length))


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def rpc_deliver(ssl_context: ssl.SSLContext | None = None, timeout: float = 5.0):
    """A ``deliver`` callable for :meth:`TokenService.issue_invalidation`."""

    def deliver(address: str, notice: InvalidationNotice, signature: str) -> None:
        reply = send_oneshot(address, invalidate_message(notice, signature), timeout, ssl_context)
        if reply.get("status") != "ok":
            raise ConnectionError(reply.get("reason", "invalidation refused"))

    return deliver


# -- TLS ---------------------------------------------------------------------


def self_signed_tls(directory: str | Path | None = None, host: str = "127.0.0.1"):
    """Create a throwaway certificate; returns (server_context, client_context)."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.x509.oid import NameOID

    directory = Path(directory or tempfile.mkdtemp(prefix="collabiot-tls-"))
    key = ec.generate_private_key(ec.SECP256R1())
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, host)])
    now = datetime.datetime.now(datetime.timezone.utc)
    try:
        san = x509.SubjectAlternativeName([x509.IPAddress(ipaddress.ip_address(host))])
    except ValueError:
        san = x509.SubjectAlternativeName([x509.DNSName(host)])
    cert = (
        x509.CertificateBuilder()
        .subject_name(name).issuer_name(name).public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(san, critical=False)
        .sign(key, hashes.SHA256())
    )
    cert_path, key_path = directory / "cert.pem", directory / "key.pem"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    ))
    server = ssl.create_default_context(ssl.Purpose.CLIENT_AUTH)
    server.load_cert_chain(cert_path, key_path)
    client = ssl.create_default_context(cafile=str(cert_path))
    return server, client
