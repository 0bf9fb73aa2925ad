"""Dispatch queue in front of a device adapter."""

from __future__ import annotations

import heapq
import itertools
import threading
from dataclasses import dataclass
from typing import Any

MODES = ("none", "fcfs", "priority-fcfs")
DEFAULT_PRIORITY = 10


class QueueFull(Exception):
    pass


@dataclass(frozen=True)
class SchedulerPolicy:
    """``none`` runs every admitted request immediately (no queue);
    ``fcfs`` serves in arrival order; ``priority-fcfs`` serves the lowest
    priority number first, ties broken by arrival order."""

    mode: str = "fcfs"
    capacity: int = 1024

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"scheduler mode must be one of {MODES}")
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")


class DispatchQueue:
    def __init__(self, policy: SchedulerPolicy | None = None):
        self.policy = policy or SchedulerPolicy()
        self._heap: list[tuple[int, int, Any]] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def push(self, item: Any, priority: int = DEFAULT_PRIORITY) -> None:
        with self._lock:
            if len(self._heap) >= self.policy.capacity:
                raise QueueFull(f"dispatch queue at capacity {self.policy.capacity}")
            key = priority if self.policy.mode == "priority-fcfs" else 0
            heapq.heappush(self._heap, (key, next(self._seq), item))

    def pop(self) -> Any:
        with self._lock:
            return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)
