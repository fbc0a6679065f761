"""Negative samplers: uniform (RNS), global popularity (PNS), hard (HNS), in-community popularity (ICPNS).

All samplers share one contract: for every user ``u`` in a batch they return an
item outside ``u``'s training positives. Weighted strategies draw from an alias
table, reject training positives up to ``retry_cap`` times, and then fall back
to an exact draw over the renormalised candidate weights.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .alias import AliasTable, build_alias, draw_alias
from .data import Interactions

log = logging.getLogger(__name__)

STRATEGIES = ("rns", "pns", "hns", "icpns")

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NoCandidateError(ValueError):
    """The user has interacted with every item, so no negative exists."""


@dataclass(frozen=True)
class SamplerSpec:
    strategy: str = "rns"
    alpha: float = 0.1
    candidates: int = 10
    retry_cap: int = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.candidates < 1 or self.retry_cap < 1:
            raise ValueError("candidates and retry_cap must be >= 1")


def smoothed_counts(counts, alpha: float) -> np.ndarray:
    """counts ** alpha with 0 ** alpha taken as 0 for every alpha, including 0."""
    counts = np.asarray(counts, dtype=np.float64)
    out = np.zeros_like(counts)
    pos = counts > 0
    out[pos] = counts[pos] ** alpha
    return out


class WeightedTable:
    """Alias table over the positive-weight items of a length-M weight vector."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.support = np.flatnonzero(self.weights > 0)
        self.table: AliasTable | None = build_alias(self.weights[self.support]) if self.support.size else None

    @property
    def empty(self) -> bool:
        return self.table is None

    def draw(self, rng, size):
        return self.support[draw_alias(self.table, rng, size)]


class NegativeSampler:
    name = "base"

    def __init__(self, train: Interactions, retry_cap: int = 100):
        self.train = train
        self.retry_cap = int(retry_cap)
        self.stats: Counter = Counter()

    def sample(self, users, rng: np.random.Generator, scorer: Scorer | None = None) -> np.ndarray:
        raise NotImplementedError

    def target_distribution(self, u: int) -> np.ndarray:
        """Exact probability of every item being drawn for user ``u``."""
        raise NotImplementedError

    def _check_candidates(self, users):
        full = self.train.user_degrees()[users] >= self.train.n_items
        if full.any():
            raise NoCandidateError(f"user {int(users[np.argmax(full)])} has no unobserved item")

    def _rejection(self, users, draw: Callable[[np.ndarray], np.ndarray], rng):
        """Draw for every slot, redrawing slots that hit a training positive.

        Returns the draws and the mask of slots still rejected after ``retry_cap`` attempts.
        """
        out = draw(np.arange(users.size))
        pending = np.flatnonzero(self.train.contains_many(users, out))
        for _ in range(self.retry_cap - 1):
            if pending.size == 0:
                break
            out[pending] = draw(pending)
            pending = pending[self.train.contains_many(users[pending], out[pending])]
        return out, pending

    def _complement(self, u: int) -> np.ndarray:
        mask = np.ones(self.train.n_items, dtype=bool)
        mask[self.train.items_of(u)] = False
        return np.flatnonzero(mask)


class RandomSampler(NegativeSampler):
    """Uniform over the items the user has not interacted with."""

    name = "rns"

    def sample(self, users, rng, scorer=None):
        users = np.asarray(users, dtype=np.int64)
        self._check_candidates(users)
        m = self.train.n_items
        out, pending = self._rejection(users, lambda slots: rng.integers(m, size=slots.size), rng)
        for k in pending:
            cand = self._complement(int(users[k]))
            out[k] = cand[rng.integers(cand.size)]
            self.stats["exact_fallback"] += 1
        return out

    def target_distribution(self, u):
        p = np.zeros(self.train.n_items)
        cand = self._complement(u)
        if cand.size == 0:
            raise NoCandidateError(f"user {u} has no unobserved item")
        p[cand] = 1.0 / cand.size
        return p


class _TableSampler(NegativeSampler):
    """Shared machinery for samplers backed by one weighted table per user group."""

    def __init__(self, train, retry_cap=100):
        super().__init__(train, retry_cap)
        self._uniform = RandomSampler(train, retry_cap)

    def group_of(self, users: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def table_for(self, group: int) -> WeightedTable:
        raise NotImplementedError

    def sample(self, users, rng, scorer=None):
        users = np.asarray(users, dtype=np.int64)
        self._check_candidates(users)
        out = np.empty(users.size, dtype=np.int64)
        groups = self.group_of(users)
        for g in np.unique(groups):
            slots = np.flatnonzero(groups == g)
            table = self.table_for(int(g))
            if table.empty:
                self.stats["rns_fallback"] += slots.size
                out[slots] = self._uniform.sample(users[slots], rng)
                continue
            sub_users = users[slots]
            draws, pending = self._rejection(sub_users, lambda s: table.draw(rng, s.size), rng)
            for k in pending:
                draws[k] = self._exact(int(sub_users[k]), table, rng)
            out[slots] = draws
        return out

    def _exact(self, u: int, table: WeightedTable, rng) -> int:
        cand = table.support[~self.train.contains_many(np.full(table.support.size, u), table.support)]
        if cand.size == 0:
            self.stats["rns_fallback"] += 1
            log.debug("user %d: no positive-mass candidate left, uniform fallback", u)
            return int(self._uniform.sample(np.array([u]), rng)[0])
        self.stats["exact_fallback"] += 1
        w = table.weights[cand]
        return int(cand[np.searchsorted(np.cumsum(w), rng.random() * w.sum(), side="right").clip(max=cand.size - 1)])

    def target_distribution(self, u):
        table = self.table_for(int(self.group_of(np.array([u]))[0]))
        w = table.weights.copy()
        w[self.train.items_of(u)] = 0.0
        if w.sum() <= 0:
            return self._uniform.target_distribution(u)
        return w / w.sum()


class PopularitySampler(_TableSampler):
    """Global popularity ``count ** alpha`` restricted to unobserved items."""

    name = "pns"

    def __init__(self, train: Interactions, alpha: float = 0.1, retry_cap: int = 100):
        super().__init__(train, retry_cap)
        self.alpha = alpha
        self.global_table = WeightedTable(smoothed_counts(train.item_degrees(), alpha))

    def group_of(self, users):
        return np.zeros(users.size, dtype=np.int64)

    def table_for(self, group):
        return self.global_table


class CommunitySampler(_TableSampler):
    """In-community popularity: each user draws from its community's smoothed counts."""

    name = "icpns"

    def __init__(self, train: Interactions, community, retry_cap: int = 100):
        super().__init__(train, retry_cap)
        self.community = community
        self._tables = [WeightedTable(row) for row in community.smoothed]

    def group_of(self, users):
        return self.community.assignment[users]

    def table_for(self, group):
        return self._tables[group]


class HardSampler(NegativeSampler):
    """Score ``s`` uniform candidates with the current model and keep the best.

    Candidates are independent uniform draws (with replacement) over the user's
    unobserved items, at most as many as such items exist. Ties go to the lowest
    item index.
    """

    name = "hns"

    def __init__(self, train: Interactions, candidates: int = 10, retry_cap: int = 100):
        super().__init__(train, retry_cap)
        self.candidates = int(candidates)
        self._uniform = RandomSampler(train, retry_cap)

    def sample(self, users, rng, scorer=None):
        if scorer is None:
            raise ValueError("hard negative sampling needs a scorer")
        users = np.asarray(users, dtype=np.int64)
        s = self.candidates
        flat_users = np.repeat(users, s)
        cand = self._uniform.sample(flat_users, rng).reshape(users.size, s)
        scores = np.asarray(scorer(flat_users, cand.ravel()), dtype=np.float64).reshape(users.size, s)
        avail = self.train.n_items - self.train.user_degrees()[users]
        short = avail < s
        if short.any():
            cols = np.arange(s)
            scores[short] = np.where(cols[None, :] < avail[short, None], scores[short], -np.inf)
        best = scores.max(axis=1, keepdims=True)
        masked = np.where(scores == best, cand, np.iinfo(np.int64).max)
        return masked.min(axis=1)


def make_sampler(spec: SamplerSpec, train: Interactions, community=None) -> NegativeSampler:
    if spec.strategy == "rns":
        return RandomSampler(train, spec.retry_cap)
    if spec.strategy == "pns":
        return PopularitySampler(train, spec.alpha, spec.retry_cap)
    if spec.strategy == "hns":
        return HardSampler(train, spec.candidates, spec.retry_cap)
    if community is None:
        raise ValueError("icpns needs a community model")
    return CommunitySampler(train, community, spec.retry_cap)


# Single-draw entry points. Each wraps the batched sampler for one user.

def sample_rns(u: int, interactions: Interactions, rng, retry_cap: int = 100) -> int:
    return int(RandomSampler(interactions, retry_cap).sample(np.array([u]), rng)[0])


def sample_pns(u: int, global_table: WeightedTable, interactions: Interactions, rng,
               retry_cap: int = 100) -> int:
    sampler = PopularitySampler.__new__(PopularitySampler)
    _TableSampler.__init__(sampler, interactions, retry_cap)
    sampler.global_table = global_table
    return int(sampler.sample(np.array([u]), rng)[0])


def sample_hns(u: int, scorer: Scorer, interactions: Interactions, s: int, rng,
               retry_cap: int = 100) -> int:
    return int(HardSampler(interactions, s, retry_cap).sample(np.array([u]), rng, scorer)[0])


def sample_icpns(u: int, community, interactions: Interactions, rng, retry_cap: int = 100) -> int:
    return int(CommunitySampler(interactions, community, retry_cap).sample(np.array([u]), rng)[0])
