"""Benchmark reports: named sample series, emitted as JSON and CSV."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np


@dataclass
class MetricSeries:
    name: str
    unit: str
    samples: list[float] = field(default_factory=list)

    def add(self, value: float) -> None:
        self.samples.append(float(value))

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples)) if self.samples else float("nan")

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples, 50)) if self.samples else float("nan")

    @property
    def p99(self) -> float:
        return float(np.percentile(self.samples, 99)) if self.samples else float("nan")

    def summary(self) -> dict[str, Any]:
        return {"name": self.name, "unit": self.unit, "count": self.count,
                "mean": self.mean, "p50": self.p50, "p99": self.p99}


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class BenchReport:
    name: str
    config_hash: str = ""
    repetition: int = 0
    metrics: dict[str, MetricSeries] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=lambda: {"issued": 0, "admitted": 0, "denied": 0, "errored": 0})
    decisions: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    def series(self, name: str, unit: str = "") -> MetricSeries:
        if name not in self.metrics:
            self.metrics[name] = MetricSeries(name, unit)
        return self.metrics[name]

    def conserved(self) -> bool:
        c = self.counts
        return c["admitted"] + c["denied"] + c["errored"] == c["issued"]

    def to_dict(self, samples: bool = True) -> dict[str, Any]:
        metrics = []
        for m in self.metrics.values():
            entry = m.summary()
            if samples:
                entry["samples"] = m.samples
            metrics.append(entry)
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "repetition": self.repetition,
            "counts": dict(self.counts),
            "metrics": metrics,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False, default=_jsonable)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["metric", "unit", "count", "mean", "p50", "p99"])
        for m in self.metrics.values():
            s = m.summary()
            w.writerow([s["name"], s["unit"], s["count"], s["mean"], s["p50"], s["p99"]])
        return buf.getvalue()

    def write(self, root: str | Path = "results", stamp: str | None = None) -> Path:
        stamp = stamp or time.strftime("%Y%m%dT%H%M%S")
        out = Path(root) / self.name / stamp
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        return out


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Mapping):
        return dict(obj)
    return str(obj)
