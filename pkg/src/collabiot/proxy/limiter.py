"""Per-session limiters: token bucket for rates, a counter for max-uses."""

from __future__ import annotations

import math

from ..model import Limit, default_burst

# absorbs float drift in refill arithmetic (e.g. 10/s * 0.1 s)
EPS = 1e-9


def _slack(rate: float, now: float) -> float:
    # epoch timestamps are rounded to one ulp (~2e-7 s); forgive that much refill
    return EPS + rate * math.ulp(now)


class TokenBucket:
    """Token bucket that starts full.

    The rate can be overridden temporarily. Lowering the burst does not
    discard tokens immediately; the level is clamped to the current burst
    at the next admission, so an override that is lifted before any traffic
    leaves the bucket exactly as it was.
    """

    def __init__(self, rate: float, burst: int, now: float):
        self.base_rate = float(rate)
        self.base_burst = int(burst)
        self.rate = self.base_rate
        self.burst = self.base_burst
        self.level = float(burst)
        self.last = float(now)

    def refill(self, now: float) -> None:
        dt = now - self.last
        if dt > 0:
            if self.level < self.burst:
                self.level = min(float(self.burst), self.level + self.rate * dt)
            self.last = now

    def try_acquire(self, now: float) -> bool:
        self.refill(now)
        self.level = min(self.level, float(self.burst))
        if self.level + _slack(self.rate, now) >= 1.0:
            # a deficit within the slack is carried, so early admissions cannot accumulate
            self.level -= 1.0
            return True
        return False

    def retry_after(self, now: float) -> float:
        self.refill(now)
        missing = 1.0 - min(self.level, float(self.burst)) - _slack(self.rate, now)
        return max(0.0, missing / self.rate)

    def override(self, rate: float, now: float) -> None:
        self.refill(now)
        self.rate = float(rate)
        self.burst = min(self.base_burst, default_burst(rate))

    def restore(self, now: float) -> None:
        self.refill(now)
        self.rate, self.burst = self.base_rate, self.base_burst

    def state(self) -> tuple[float, int, float]:
        return (self.rate, self.burst, self.level)


class UseCounter:
    def __init__(self, count: int):
        self.remaining = int(count)

    def try_acquire(self, now: float) -> bool:
        if self.remaining <= 0:
            return False
        self.remaining -= 1
        return True

    def retry_after(self, now: float) -> float | None:
        return None


def make_limiter(limit: Limit | None, now: float):
    if limit is None:
        return None
    if limit.kind == "rate":
        return TokenBucket(limit.rate, limit.burst, now)
    return UseCounter(limit.count)
