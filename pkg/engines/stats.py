"""Mergeable running statistics for Monte Carlo samples."""

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class MCStats:
    """Count, mean and sum of squared deviations; merges with Chan's pairwise update."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_values(cls, values: Iterable[float]) -> "MCStats":
        arr = np.asarray(values, dtype=float).ravel()
        if arr.size == 0:
            return cls()
        mean = float(arr.mean())
        return cls(int(arr.size), mean, float(np.sum((arr - mean) ** 2)))

    def add(self, value: float) -> "MCStats":
        n = self.n + 1
        delta = value - self.mean
        mean = self.mean + delta / n
        return MCStats(n, mean, self.m2 + delta * (value - mean))

    def merge(self, other: "MCStats") -> "MCStats":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return MCStats(n, mean, m2)

    @property
    def variance(self) -> float:
        """Unbiased sample variance."""
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "variance": self.variance, "stderr": self.stderr}


def merge_all(parts: Iterable[MCStats]) -> MCStats:
    """Merge statistics in the given (canonical) order."""
    total = MCStats()
    for part in parts:
        total = total.merge(part)
    return total
