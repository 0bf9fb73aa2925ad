"""Per-device enforcement: session cache, admission, context-driven limits."""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from ..tokens import (
    DEFAULT_CLOCK_SKEW,
    InvalidationNotice,
    MalformedToken,
    TokenClaims,
    TokenError,
    peek_claims,
    verify,
    verify_message,
)
from .adapters import AdapterError, Chunks, DeviceAdapter
from .limiter import TokenBucket, make_limiter
from .scheduler import DEFAULT_PRIORITY, SchedulerPolicy


class InvalidatedToken(TokenError):
    pass


class WrongAudience(TokenError):
    pass


class UnknownCapability(ValueError):
    pass


_request_ids = itertools.count(1)


@dataclass
class RequestEnvelope:
    method: str
    args: Any = None
    capability: str | None = None
    priority: int = DEFAULT_PRIORITY
    request_id: str = field(default_factory=lambda: f"r{next(_request_ids)}")
    jti: str | None = None
    token: str | None = None

    @classmethod
    def from_wire(cls, msg: Mapping[str, Any]) -> "RequestEnvelope":
        return cls(
            method=str(msg["method"]),
            args=msg.get("args"),
            capability=msg.get("capability"),
            priority=int(msg.get("priority", DEFAULT_PRIORITY)),
            request_id=str(msg.get("request_id") or f"r{next(_request_ids)}"),
            jti=msg.get("jti"),
            token=msg.get("token"),
        )


@dataclass
class Session:
    jti: str
    claims: TokenClaims
    admitted_at: float
    limiters: dict[str, Any]
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def buckets(self) -> dict[str, TokenBucket]:
        return {c: l for c, l in self.limiters.items() if isinstance(l, TokenBucket)}


@dataclass(frozen=True)
class Decision:
    admitted: bool
    reason: str | None = None
    retry_after: float | None = None

    def __bool__(self) -> bool:
        return self.admitted


ADMIT = Decision(True)


class DeviceProxy:
    def __init__(self, device_id: str, adapter: DeviceAdapter, issuer_pubkey: Ed25519PublicKey,
                 scheduler: SchedulerPolicy | None = None, clock_skew: float = DEFAULT_CLOCK_SKEW):
        self.device_id = device_id
        self.adapter = adapter
        self.issuer_pubkey = issuer_pubkey
        self.scheduler = scheduler or SchedulerPolicy()
        self.clock_skew = clock_skew
        self.sessions: dict[str, Session] = {}
        self.invalid: dict[str, float] = {}
        # context name -> (capability -> rate, subjects or None)
        self.contexts: dict[str, tuple[dict[str, float], frozenset[str] | None]] = {}
        self._lock = threading.Lock()

    # -- sessions ------------------------------------------------------------

    def establish_session(self, token: str, now: float,
                          invalid_list: Mapping[str, Any] | None = None) -> Session:
        invalid = self.invalid if invalid_list is None else invalid_list
        try:
            jti = peek_claims(token).get("jti")
        except MalformedToken:
            jti = None
        if jti is not None and jti in invalid:
            raise InvalidatedToken(f"token {jti} has been invalidated")
        claims = verify(token, self.issuer_pubkey, now, self.clock_skew)
        if claims.aud != self.device_id:
            raise WrongAudience(f"token is for {claims.aud!r}, not {self.device_id!r}")
        with self._lock:
            if claims.jti in self.invalid:
                raise InvalidatedToken(f"token {claims.jti} has been invalidated")
            existing = self.sessions.get(claims.jti)
            if existing is not None:
                return existing
            session = Session(
                jti=claims.jti,
                claims=claims,
                admitted_at=now,
                limiters={cap: make_limiter(limit, now) for cap, limit in claims.inc_cap},
            )
            self._apply_contexts(session, now)
            self.sessions[claims.jti] = session
            return session

    def session(self, jti: str) -> Session | None:
        return self.sessions.get(jti)

    def evict(self, jti: str) -> bool:
        with self._lock:
            return self.sessions.pop(jti, None) is not None

    def authorize_and_admit(self, session: Session | str, req: RequestEnvelope, now: float) -> Decision:
        if isinstance(session, str):
            jti = session
            session = self.sessions.get(jti)
            if session is None:
                reason = "invalidated" if jti in self.invalid else "no-session"
                return Decision(False, reason)
        if session.jti in self.invalid or session.jti not in self.sessions:
            return Decision(False, "invalidated")
        if now > session.claims.exp + self.clock_skew:
            self.evict(session.jti)
            return Decision(False, "expired")
        if req.method not in self.adapter.api:
            return Decision(False, "method")
        capability = self.adapter.capability_of(req.method)
        if req.capability is not None and req.capability != capability:
            return Decision(False, "capability")
        if capability not in session.limiters:
            return Decision(False, "capability")
        limiter = session.limiters[capability]
        if limiter is None:
            return ADMIT
        with session.lock:
            if limiter.try_acquire(now):
                return ADMIT
            return Decision(False, "limit", limiter.retry_after(now))

    # -- context-aware limits -----------------------------------------------

    def update_context_rate(self, signal: Mapping[str, Any], overrides: Mapping[str, float],
                            now: float) -> dict[str, float]:
        """Activate or deactivate a named context.

        While active, every session holding a rate limit on an overridden
        capability runs at the override rate (the strictest one when several
        contexts overlap). ``signal["subjects"]`` optionally restricts the
        override to specific guest ids. Unlimited grants are never touched.
        Returns the capability rates currently in force from all contexts.
        """
        name = str(signal["context_name"])
        active = bool(signal.get("active", True))
        known = self.adapter.capabilities
        for cap, rate in overrides.items():
            if cap not in known:
                raise UnknownCapability(cap)
            if not float(rate) > 0:
                raise ValueError(f"override rate for {cap} must be positive")
        with self._lock:
            if active:
                subjects = signal.get("subjects")
                self.contexts[name] = (
                    {c: float(r) for c, r in overrides.items()},
                    frozenset(subjects) if subjects else None,
                )
            else:
                self.contexts.pop(name, None)
            for session in self.sessions.values():
                self._apply_contexts(session, now)
        return self.active_overrides()

    def active_overrides(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for rates, _ in self.contexts.values():
            for cap, rate in rates.items():
                out[cap] = min(rate, out.get(cap, rate))
        return out

    def _apply_contexts(self, session: Session, now: float) -> None:
        with session.lock:
            for cap, bucket in session.buckets().items():
                rate = None
                for rates, subjects in self.contexts.values():
                    if cap in rates and (subjects is None or session.claims.sub in subjects):
                        rate = rates[cap] if rate is None else min(rate, rates[cap])
                if rate is None:
                    if bucket.rate != bucket.base_rate or bucket.burst != bucket.base_burst:
                        bucket.restore(now)
                else:
                    bucket.override(rate, now)

    # -- invalidation --------------------------------------------------------

    def apply_invalidation(self, notice: InvalidationNotice, now: float,
                           signature: str | None = None) -> int:
        if signature is not None:
            verify_message(notice.to_dict(), signature, self.issuer_pubkey)
        evicted = 0
        with self._lock:
            for jti in notice.jtis:
                self.invalid[jti] = notice.not_after
                if self.sessions.pop(jti, None) is not None:
                    evicted += 1
        self.prune(now)
        return evicted

    def prune(self, now: float) -> None:
        with self._lock:
            for jti, not_after in list(self.invalid.items()):
                if not_after + self.clock_skew < now:
                    del self.invalid[jti]
            for jti, s in list(self.sessions.items()):
                if s.claims.exp + self.clock_skew < now:
                    del self.sessions[jti]

    # -- direct execution ----------------------------------------------------

    def execute(self, req: RequestEnvelope) -> Any:
        """Run an admitted request on the adapter (no queueing, no waiting)."""
        try:
            result = self.adapter.execute(req.method, req.args)
        except AdapterError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise AdapterError(self.adapter.device_type, req.method, str(exc)) from exc
        if isinstance(result, Chunks):
            return list(result.items)
        return result
