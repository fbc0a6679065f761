"""Walker/Vose alias tables: O(n) construction, O(1) draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NoMassError(ValueError):
    """Every weight is zero, so there is no distribution to sample."""


@dataclass(frozen=True)
class AliasTable:
    n: int
    prob: np.ndarray
    alias: np.ndarray
    total_weight: float

    def probabilities(self) -> np.ndarray:
        """Reconstruct the encoded distribution: (prob_j + sum_{alias_k = j} (1 - prob_k)) / n."""
        out = self.prob.copy()
        np.add.at(out, self.alias, 1.0 - self.prob)
        return out / self.n


def build_alias(weights) -> AliasTable:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D array")
    if not np.all(np.isfinite(w)) or (w < 0).any():
        raise ValueError("weights must be finite and non-negative")
    total = float(w.sum())
    if total <= 0:
        raise NoMassError("all weights are zero")

    n = w.size
    scaled = w * (n / total)
    prob = np.zeros(n)
    alias = np.arange(n, dtype=np.int64)
    small = [k for k in range(n) if scaled[k] < 1.0]
    large = [k for k in range(n) if scaled[k] >= 1.0]
    scaled = scaled.tolist()
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers hold mass 1 up to rounding; zero weights never land here as
    # long as some large entry absorbed them, which the loop guarantees.
    for k in large + small:
        prob[k] = 1.0 if w[k] > 0 else 0.0
        if w[k] == 0:
            alias[k] = int(np.flatnonzero(w)[0])
    prob.setflags(write=False)
    alias.setflags(write=False)
    return AliasTable(n, prob, alias, total)


def draw_alias(table: AliasTable, rng: np.random.Generator, size=None):
    """Draw indices from ``table``: one uniform column plus one biased coin per draw."""
    col = rng.integers(table.n, size=size)
    coin = rng.random(size=size)
    out = np.where(coin < table.prob[col], col, table.alias[col])
    return int(out) if size is None else out
