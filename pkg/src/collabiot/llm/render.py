"""Fixed-template English rendering of groups and policies."""

from __future__ import annotations

from ..model import AccessPolicy, GroupSpec, Limit


def _either(values) -> str:
    values = list(values)
    if len(values) == 1:
        return values[0]
    if len(values) == 2:
        return f"{values[0]} or {values[1]}"
    return ", ".join(values[:-1]) + f", or {values[-1]}"


def _all(values) -> str:
    values = list(values)
    if len(values) == 1:
        return values[0]
    if len(values) == 2:
        return f"{values[0]} and {values[1]}"
    return ", ".join(values[:-1]) + f", and {values[-1]}"


def _number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_limit(limit: Limit) -> str:
    if limit.kind == "max-uses":
        return f"at most {limit.count} use" + ("" if limit.count == 1 else "s")
    return f"at most {_number(limit.rate)} requests per second, burst {limit.burst}"


def render_group(group: GroupSpec) -> str:
    clauses = []
    for attr, c in group.constraints.items():
        if c.includes and c.excludes:
            clauses.append(f"whose {attr} is {_either(c.includes)} but not {_either(c.excludes)}")
        elif c.includes:
            clauses.append(f"whose {attr} is {_either(c.includes)}")
        elif len(c.excludes) == 1:
            clauses.append(f"whose {attr} is not {c.excludes[0]}")
        else:
            clauses.append(f"whose {attr} is neither " + " nor ".join(c.excludes))
    return f"Group {group.name}: devices " + " and ".join(clauses) + "."


def render_policy(policy: AccessPolicy) -> str:
    if policy.includes:
        caps = [e.name if e.limit is None else f"{e.name} ({render_limit(e.limit)})" for e in policy.includes]
        what = _all(caps)
    else:
        what = "every capability except " + _all(policy.excludes)
    text = (
        f"Policy {policy.name}: devices in group {policy.destination} may use {what} "
        f"on devices in group {policy.source}."
    )
    if policy.ttl is not None:
        text += f" Access expires after {_number(policy.ttl)} seconds."
    return text


def render_policy_text(artifact: GroupSpec | AccessPolicy) -> str:
    if isinstance(artifact, GroupSpec):
        return render_group(artifact)
    if isinstance(artifact, AccessPolicy):
        return render_policy(artifact)
    raise TypeError(f"cannot render {type(artifact).__name__}")
