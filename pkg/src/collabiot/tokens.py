"""Capability tokens: compact EdDSA JWTs, issuance on join, invalidation.

Tokens are signed, not encrypted; claims carry no secrets and rely on the
encrypted transport for confidentiality.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .engine import GUEST, ChangeResult, DeviceRecord, PolicyStore, resolve_access
from .model import Limit

log = logging.getLogger(__name__)

DEFAULT_ISSUER = "CollabIoT"
DEFAULT_CLOCK_SKEW = 30
_HEADER = {"alg": "EdDSA", "typ": "JWT"}


class TokenError(Exception):
    pass


class MalformedToken(TokenError):
    pass


class BadSignature(TokenError):
    pass


class Expired(TokenError):
    pass


class NotYetValid(TokenError):
    pass


class SigningError(TokenError):
    pass


class AuthenticationError(Exception):
    pass


class DeliveryError(Exception):
    def __init__(self, address: str, cause: BaseException | None = None):
        self.address = address
        super().__init__(f"could not deliver to {address}: {cause}")


# -- encoding helpers --------------------------------------------------------


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(segment: str) -> bytes:
    """Strict base64url: no padding, canonical trailing bits only."""
    if not segment or "=" in segment:
        raise MalformedToken("bad base64url segment")
    try:
        raw = base64.urlsafe_b64decode(segment + "=" * (-len(segment) % 4))
    except (binascii.Error, ValueError) as exc:
        raise MalformedToken("bad base64url segment") from exc
    if b64url_encode(raw) != segment:
        raise MalformedToken("non-canonical base64url segment")
    return raw


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


# -- keys --------------------------------------------------------------------


def generate_keypair() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def save_private_key(key: Ed25519PrivateKey, path: str | Path) -> None:
    pem = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    Path(path).write_bytes(pem)


def load_private_key(path: str | Path, create: bool = False) -> Ed25519PrivateKey:
    path = Path(path)
    if not path.exists() and create:
        path.parent.mkdir(parents=True, exist_ok=True)
        key = generate_keypair()
        save_private_key(key, path)
        return key
    key = serialization.load_pem_private_key(path.read_bytes(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise ValueError(f"{path} does not hold an Ed25519 private key")
    return key


def public_key_pem(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public_key(data: bytes) -> Ed25519PublicKey:
    key = serialization.load_pem_public_key(data)
    if not isinstance(key, Ed25519PublicKey):
        raise ValueError("not an Ed25519 public key")
    return key


# -- claims ------------------------------------------------------------------


@dataclass(frozen=True)
class TokenClaims:
    iss: str
    sub: str
    aud: str
    iat: int
    nbf: int
    exp: int
    inc_cap: tuple[tuple[str, Limit | None], ...]
    jti: str

    def __post_init__(self):
        if not (self.iat <= self.nbf <= self.exp):
            raise ValueError("claims need iat <= nbf <= exp")
        if not self.inc_cap:
            raise ValueError("inc_cap must not be empty")

    @property
    def capabilities(self) -> dict[str, Limit | None]:
        return dict(self.inc_cap)

    def to_dict(self) -> dict[str, Any]:
        caps = []
        for name, limit in self.inc_cap:
            entry: dict[str, Any] = {"capability": name}
            if limit is not None:
                entry["limit"] = limit.encode()
            caps.append(entry)
        return {
            "iss": self.iss, "sub": self.sub, "aud": self.aud,
            "iat": self.iat, "nbf": self.nbf, "exp": self.exp,
            "inc_cap": caps, "jti": self.jti,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TokenClaims":
        try:
            caps = tuple(
                (str(e["capability"]), Limit.decode(e["limit"]) if e.get("limit") is not None else None)
                for e in data["inc_cap"]
            )
            ints = {k: data[k] for k in ("iat", "nbf", "exp")}
            if any(not isinstance(v, int) or isinstance(v, bool) for v in ints.values()):
                raise TypeError("timestamps must be integers")
            return cls(
                iss=str(data["iss"]), sub=str(data["sub"]), aud=str(data["aud"]),
                inc_cap=caps, jti=str(data["jti"]), **ints,
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise MalformedToken(f"bad claims: {exc}") from exc


def sign_token(claims: TokenClaims, key: Ed25519PrivateKey) -> str:
    try:
        signing_input = b64url_encode(canonical_json(_HEADER)) + "." + b64url_encode(canonical_json(claims.to_dict()))
        sig = key.sign(signing_input.encode("ascii"))
    except Exception as exc:  # noqa: BLE001 - any backend failure is a signing failure
        raise SigningError(str(exc)) from exc
    return signing_input + "." + b64url_encode(sig)


def peek_claims(token: str) -> dict[str, Any]:
    """Decode claims without verifying. Only for routing decisions."""
    parts = token.split(".") if isinstance(token, str) else []
    if len(parts) != 3:
        raise MalformedToken("token must have three segments")
    try:
        claims = json.loads(b64url_decode(parts[1]))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedToken("claims segment is not JSON") from exc
    if not isinstance(claims, dict):
        raise MalformedToken("claims must be an object")
    return claims


def verify(token: str, issuer_pubkey: Ed25519PublicKey, now: float,
           clock_skew: float = DEFAULT_CLOCK_SKEW) -> TokenClaims:
    if not isinstance(token, str):
        raise MalformedToken("token must be a string")
    parts = token.split(".")
    if len(parts) != 3:
        raise MalformedToken("token must have three segments")
    header_seg, claims_seg, sig_seg = parts
    try:
        header = json.loads(b64url_decode(header_seg))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedToken("header is not JSON") from exc
    if not isinstance(header, dict) or header.get("alg") != "EdDSA":
        raise MalformedToken("unsupported token header")
    claims_raw = b64url_decode(claims_seg)
    sig = b64url_decode(sig_seg)
    try:
        issuer_pubkey.verify(sig, f"{header_seg}.{claims_seg}".encode("ascii"))
    except InvalidSignature as exc:
        raise BadSignature("signature does not verify") from exc
    try:
        data = json.loads(claims_raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedToken("claims are not JSON") from exc
    if not isinstance(data, dict):
        raise MalformedToken("claims must be an object")
    claims = TokenClaims.from_dict(data)
    if now < claims.nbf - clock_skew:
        raise NotYetValid(f"token not valid before {claims.nbf}")
    if now > claims.exp + clock_skew:
        raise Expired(f"token expired at {claims.exp}")
    return claims


# -- authentication ----------------------------------------------------------


class Authenticator(Protocol):
    def authenticate(self, device_id: str, credential: Any) -> None:
        """Raise AuthenticationError if the credential is not acceptable."""


class AcceptAll:
    """Test-mode authenticator."""

    def authenticate(self, device_id: str, credential: Any) -> None:
        return None


class StaticCredentials:
    def __init__(self, table: Mapping[str, str]):
        self._table = dict(table)

    def authenticate(self, device_id: str, credential: Any) -> None:
        expected = self._table.get(device_id)
        if expected is None or credential != expected:
            raise AuthenticationError(f"bad credential for {device_id!r}")


# -- ledger and invalidation -------------------------------------------------


class TokenLedger:
    """Live tokens keyed by (sub, aud); entries pruned after exp + skew."""

    def __init__(self, clock_skew: float = DEFAULT_CLOCK_SKEW):
        self.clock_skew = clock_skew
        self._lock = threading.Lock()
        self._live: dict[tuple[str, str], dict[str, int]] = {}

    def record(self, claims: TokenClaims) -> None:
        with self._lock:
            self._live.setdefault((claims.sub, claims.aud), {})[claims.jti] = claims.exp

    def live(self, pair: tuple[str, str], now: float | None = None) -> dict[str, int]:
        with self._lock:
            entries = dict(self._live.get(pair, {}))
        if now is not None:
            entries = {j: e for j, e in entries.items() if e + self.clock_skew >= now}
        return entries

    def discard(self, jtis: Iterable[str]) -> None:
        drop = set(jtis)
        with self._lock:
            for pair in list(self._live):
                bucket = self._live[pair]
                for j in drop & bucket.keys():
                    del bucket[j]
                if not bucket:
                    del self._live[pair]

    def prune(self, now: float) -> int:
        removed = 0
        with self._lock:
            for pair in list(self._live):
                bucket = self._live[pair]
                for jti, exp in list(bucket.items()):
                    if exp + self.clock_skew < now:
                        del bucket[jti]
                        removed += 1
                if not bucket:
                    del self._live[pair]
        return removed

    def all_jtis(self) -> set[str]:
        with self._lock:
            return {j for bucket in self._live.values() for j in bucket}


@dataclass(frozen=True)
class InvalidationNotice:
    jtis: tuple[str, ...]
    pairs: tuple[tuple[str, str], ...]
    revision: int
    issued_at: int
    not_after: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "jtis": list(self.jtis),
            "pairs": [list(p) for p in self.pairs],
            "revision": self.revision,
            "issued_at": self.issued_at,
            "not_after": self.not_after,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InvalidationNotice":
        return cls(
            jtis=tuple(data.get("jtis") or ()),
            pairs=tuple(tuple(p) for p in data.get("pairs") or ()),
            revision=int(data["revision"]),
            issued_at=int(data["issued_at"]),
            not_after=int(data["not_after"]),
        )


def sign_message(payload: Mapping[str, Any], key: Ed25519PrivateKey) -> str:
    return b64url_encode(key.sign(canonical_json(payload)))


def verify_message(payload: Mapping[str, Any], signature: str, pubkey: Ed25519PublicKey) -> None:
    try:
        pubkey.verify(b64url_decode(signature), canonical_json(payload))
    except (InvalidSignature, MalformedToken) as exc:
        raise BadSignature("admin message signature does not verify") from exc


@dataclass(frozen=True)
class TokenEntry:
    token: str
    proxy_address: str
    native_device_type: str | None
    claims: TokenClaims = field(compare=False, repr=False)

    def to_wire(self) -> dict[str, Any]:
        return {"token": self.token, "proxy_address": self.proxy_address, "device_type": self.native_device_type}


Deliver = Callable[[str, InvalidationNotice, str], None]


class TokenService:
    """Mints tokens for joining guests and broadcasts invalidations."""

    def __init__(self, private_key: Ed25519PrivateKey, issuer: str = DEFAULT_ISSUER,
                 authenticator: Authenticator | None = None, clock_skew: float = DEFAULT_CLOCK_SKEW,
                 jti_factory: Callable[[], str] | None = None):
        self.private_key = private_key
        self.public_key = private_key.public_key()
        self.issuer = issuer
        self.authenticator = authenticator or AcceptAll()
        self.clock_skew = clock_skew
        self.ledger = TokenLedger(clock_skew)
        self._jti = jti_factory or (lambda: uuid.uuid4().hex)

    def mint(self, sub: str, aud: str, capabilities: Mapping[str, Limit | None],
             now: float, expires_at: float) -> tuple[str, TokenClaims]:
        iat = int(now)
        claims = TokenClaims(
            iss=self.issuer, sub=sub, aud=aud, iat=iat, nbf=iat,
            exp=max(iat, int(expires_at)),
            inc_cap=tuple(sorted(capabilities.items())), jti=self._jti(),
        )
        return sign_token(claims, self.private_key), claims

    def on_device_join(self, guest: DeviceRecord, store: PolicyStore, now: float) -> list[TokenEntry]:
        entries = []
        for grant in resolve_access(guest, store, now):
            native = store.devices[grant.native]
            token, claims = self.mint(guest.id, grant.native, grant.capabilities, now, grant.expires_at)
            self.ledger.record(claims)
            entries.append(TokenEntry(token, native.address, native.device_type, claims))
        return entries

    def join(self, request: Mapping[str, Any], store: PolicyStore, now: float) -> dict[str, Any]:
        """Wire-level join: ``{device_id, credential, attributes}`` -> ``{entries}``.

        A registered guest keeps its stored attributes; request attributes
        are used for devices the store does not know yet.
        """
        device_id = request.get("device_id")
        if not isinstance(device_id, str) or not device_id:
            raise AuthenticationError("join request needs a device_id")
        self.authenticator.authenticate(device_id, request.get("credential"))
        known = store.devices.get(device_id)
        if known is not None and known.kind == GUEST:
            guest = known
        else:
            guest = DeviceRecord(device_id, request.get("attributes") or {}, kind=GUEST)
        entries = self.on_device_join(guest, store, now)
        return {"entries": [e.to_wire() for e in entries]}

    def issue_invalidation(self, change: ChangeResult, store: PolicyStore, now: float,
                           deliver: Deliver | None = None, retries: int = 3,
                           backoff: float = 0.05) -> list[InvalidationNotice]:
        """Build one notice per affected proxy and hand it to ``deliver``.

        ``store`` must still know the native devices (pass the pre-change
        snapshot when a device was removed). Delivery failures are retried
        with exponential backoff, then logged and skipped.
        """
        self.ledger.prune(now)
        by_aud: dict[str, dict[str, Any]] = {}
        for pair in sorted(change.invalidated):
            live = self.ledger.live(pair, now)
            if not live:
                continue
            bucket = by_aud.setdefault(pair[1], {"jtis": {}, "pairs": []})
            bucket["jtis"].update(live)
            bucket["pairs"].append(pair)
        notices = []
        for aud, bucket in by_aud.items():
            notice = InvalidationNotice(
                jtis=tuple(sorted(bucket["jtis"])),
                pairs=tuple(bucket["pairs"]),
                revision=change.revision,
                issued_at=int(now),
                not_after=max(bucket["jtis"].values()),
            )
            notices.append(notice)
            self.ledger.discard(notice.jtis)
            native = store.devices.get(aud)
            if deliver is None or native is None:
                continue
            signature = sign_message(notice.to_dict(), self.private_key)
            for attempt in range(retries + 1):
                try:
                    deliver(native.address, notice, signature)
                    break
                except Exception as exc:  # noqa: BLE001
                    if attempt == retries:
                        log.warning("%s", DeliveryError(native.address, exc))
                    else:
                        time.sleep(backoff * (2 ** attempt))
        return notices
