"""Streaming statistics and metrics writers.

Entropies are reported in nats throughout the package so that ratios against
log(action count) are base-consistent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def entropy(p) -> float:
    """Shannon entropy of a probability vector, in nats, with 0*ln(0) == 0.

    Raises ValueError if the input is not normalized to within 1e-6 or has
    negative entries.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("entropy of an empty vector is undefined")
    if np.any(p < -1e-12):
        raise ValueError("probability vector has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probability vector sums to {total}, not 1")
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class RunningStat:
    """Welford single-pass mean/variance accumulator with exact merging."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> "RunningStat":
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)
        return self

    def update_many(self, xs) -> "RunningStat":
        for x in np.asarray(xs, dtype=np.float64).ravel():
            self.update(float(x))
        return self

    @property
    def variance(self) -> float:
        """Population variance (zero for fewer than two samples)."""
        if self.count < 2:
            return 0.0
        return max(self.m2 / self.count, 0.0)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    def merge(self, other: "RunningStat") -> "RunningStat":
        """Combine two accumulators; equivalent to accumulating the concatenation."""
        if other.count == 0:
            return RunningStat(self.count, self.mean, self.m2)
        if self.count == 0:
            return RunningStat(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return RunningStat(n, mean, m2)


def running_update(stat: RunningStat, x: float) -> RunningStat:
    return stat.update(x)


def running_merge(a: RunningStat, b: RunningStat) -> RunningStat:
    return a.merge(b)


class JsonlWriter:
    """Append-only newline-delimited JSON writer; each record is flushed so a
    crashed run still leaves a parseable prefix."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CsvMirror:
    """Flat CSV mirror of a JSONL metrics stream (one row per record).

    Column order is fixed by the first record; later records must carry the
    same keys.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = None
        self._fields = None

    def write(self, record: dict) -> None:
        if self._writer is None:
            self._fields = list(record.keys())
            self._writer = csv.DictWriter(self._fh, fieldnames=self._fields)
            self._writer.writeheader()
        self._writer.writerow({k: record.get(k) for k in self._fields})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
