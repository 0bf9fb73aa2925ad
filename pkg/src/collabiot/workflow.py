"""Store mutations with their side effects.

A mutation is applied to the engine, the shrunken (guest, native) pairs are
turned into signed invalidation notices for the affected proxies, and every
pair whose grant grew or changed gets a freshly minted token.
"""

from __future__ import annotations

from typing import Any

from .engine import Mutation, PolicyEngine, resolve_access
from .tokens import Deliver, TokenService


def _grants(store, now):
    return {(g.guest, g.native): g for guest in store.guests() for g in resolve_access(guest, store, now)}


def apply_mutation(engine: PolicyEngine, tokens: TokenService, mutation: Mutation, now: float,
                   deliver: Deliver | None = None) -> dict[str, Any]:
    """Apply ``mutation`` and return a JSON-ready summary of its effects."""
    before = engine.store
    old = _grants(before, now)
    change = engine.apply(mutation)
    notices = tokens.issue_invalidation(change, before, now, deliver=deliver)
    reissued: dict[str, list[dict[str, Any]]] = {}
    for pair, grant in sorted(_grants(change.store, now).items()):
        prev = old.get(pair)
        if prev is not None and prev.capabilities == grant.capabilities:
            continue
        native = change.store.devices[grant.native]
        token, claims = tokens.mint(grant.guest, grant.native, grant.capabilities, now, grant.expires_at)
        tokens.ledger.record(claims)
        reissued.setdefault(grant.guest, []).append(
            {"token": token, "proxy_address": native.address, "device_type": native.device_type})
    return {
        "op": mutation.op,
        "revision": change.revision,
        "invalidated": [list(p) for p in sorted(change.invalidated)],
        "notices": [n.to_dict() for n in notices],
        "reissued": reissued,
    }
