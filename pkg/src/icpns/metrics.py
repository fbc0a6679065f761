"""Ranking metrics, negative-sample diagnostics and clustering quality."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle, Interactions
from .encoder import sigmoid

METRICS = ("recall", "ndcg", "mrr", "precision")


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RankedList:
    user: int
    items: np.ndarray
    excluded: np.ndarray


@dataclass
class MetricReport:
    k: int
    n_users: int
    recall: float
    ndcg: float
    mrr: float
    precision: float
    per_user: dict | None = field(default=None, repr=False)

    def values(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def to_json(self) -> dict:
        out = {"k": self.k, "n_users": self.n_users, **self.values()}
        if self.per_user is not None:
            out["per_user"] = {key: np.asarray(v).tolist() for key, v in self.per_user.items()}
        return out


def rank_items(scores, exclusions=(), user: int = -1) -> RankedList:
    """Order all non-excluded items by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    excluded = np.unique(np.asarray(list(exclusions), dtype=np.int64))
    keep = np.ones(scores.size, dtype=bool)
    keep[excluded] = False
    if not keep.any():
        raise UndefinedMetricError("every item is excluded")
    cand = np.flatnonzero(keep)
    order = np.argsort(-scores[cand], kind="stable")
    return RankedList(user, cand[order], excluded)


def ranking_metrics(ranked, relevant, k: int) -> tuple[float, float, float, float]:
    """(recall, ndcg, mrr, precision) at ``k`` for one user."""
    items = ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked)
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise UndefinedMetricError("empty relevant set")
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = np.array([int(i) in relevant for i in items[:k]], dtype=bool)
    return tuple(float(v) for v in _from_hits(hits[None, :], np.array([len(relevant)]), k)[0])


_DISCOUNT = 1.0 / np.log2(np.arange(2, 2050))


def _discount(n: int) -> np.ndarray:
    return _DISCOUNT[:n] if n <= _DISCOUNT.size else 1.0 / np.log2(np.arange(2, n + 2))


def _from_hits(hits: np.ndarray, n_relevant: np.ndarray, k: int) -> np.ndarray:
    """Per-user metrics from a (users, <=k) hit matrix; returns (users, 4)."""
    width = hits.shape[1]
    disc = _discount(k)
    n_hit = hits.sum(1)
    recall = n_hit / n_relevant
    dcg = (hits * disc[:width]).sum(1)
    # same reduction as the DCG so an ideal ranking scores exactly 1
    ideal = np.arange(width)[None, :] < np.minimum(n_relevant, k)[:, None]
    idcg = (ideal * disc[:width]).sum(1)
    ndcg = dcg / idcg
    first = np.where(hits.any(1), hits.argmax(1) + 1, 0)
    mrr = np.where(first > 0, 1.0 / np.maximum(first, 1), 0.0)
    precision = n_hit / k
    return np.stack([recall, ndcg, mrr, precision], axis=1)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k indices, descending score, ties by ascending index; -inf entries are never picked."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order


def evaluate(model, bundle: DatasetBundle, split: str = "test", k: int = 10,
             per_user: bool = False, chunk: int = 1024) -> MetricReport:
    """Full-ranking evaluation over all eligible users.

    Validation excludes train positives; test excludes train and validation
    positives. Users without positives in the target split or without any
    training interaction are skipped.
    """
    target: Interactions = bundle.split(split)
    exclude = bundle.train if split == "val" else bundle.train.union(bundle.val)
    eligible = np.flatnonzero((target.user_degrees() > 0) & (bundle.train.user_degrees() > 0))
    rows = []
    for start in range(0, eligible.size, chunk):
        users = eligible[start:start + chunk]
        scores = model.score_users(users).astype(np.float64, copy=True)
        ex_u = np.repeat(np.arange(users.size), exclude.user_degrees()[users])
        ex_i = np.concatenate([exclude.items_of(u) for u in users]) if users.size else np.zeros(0, int)
        scores[ex_u, ex_i.astype(np.int64)] = -np.inf
        top = top_k(scores, k)
        hits = target.contains_many(np.repeat(users, top.shape[1]), top.ravel()).reshape(top.shape)
        hits &= np.isfinite(np.take_along_axis(scores, top, axis=1))
        rows.append(_from_hits(hits, target.user_degrees()[users], k))
    table = np.concatenate(rows) if rows else np.zeros((0, 4))
    means = table.mean(0) if table.size else np.zeros(4)
    extra = None
    if per_user:
        extra = {"users": eligible, **{m: table[:, j] for j, m in enumerate(METRICS)}}
    return MetricReport(k, int(eligible.size), *map(float, means), per_user=extra)


class RecentNegatives:
    """Per-user most recent distinct sampled negatives, capped at ``k`` per user."""

    def __init__(self, n_users: int, k: int = 10):
        self.k = k
        self.n_users = n_users
        self.users = np.zeros(0, dtype=np.int64)
        self.items = np.zeros(0, dtype=np.int64)
        self.stamps = np.zeros(0, dtype=np.int64)
        self._clock = 0

    def update(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        stamps = self._clock + np.arange(users.size, dtype=np.int64)
        self._clock += users.size
        u = np.r_[self.users, users]
        i = np.r_[self.items, items]
        t = np.r_[self.stamps, stamps]
        # newest first within each user, then keep the first occurrence of each pair
        order = np.lexsort((-t, u))
        u, i, t = u[order], i[order], t[order]
        _, first = np.unique(u * (i.max() + 1 if i.size else 1) + i, return_index=True)
        keep = np.zeros(u.size, dtype=bool)
        keep[first] = True
        u, i, t = u[keep], i[keep], t[keep]
        order = np.lexsort((-t, u))
        u, i, t = u[order], i[order], t[order]
        start = np.searchsorted(u, u, side="left")
        rank = np.arange(u.size) - start
        keep = rank < self.k
        self.users, self.items, self.stamps = u[keep], i[keep], t[keep]

    def sets(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        if self.users.size == 0:
            return out
        bounds = np.flatnonzero(np.diff(self.users)) + 1
        for chunk_u, chunk_i in zip(np.split(self.users, bounds), np.split(self.items, bounds)):
            out[int(chunk_u[0])] = chunk_i
        return out


def holdout_hit(negatives: dict, val_positives, k: int = 10) -> float:
    """Mean over users of |sampled negatives ∩ validation positives| / k.

    Averages over users that have both logged negatives and at least one
    validation positive.
    """
    hits = users = 0
    for u, negs in negatives.items():
        pos = val_positives.items_of(u) if isinstance(val_positives, Interactions) else val_positives.get(u, ())
        pos = set(int(x) for x in pos)
        if not pos or len(negs) == 0:
            continue
        hits += len(set(int(x) for x in negs) & pos)
        users += 1
    if users == 0:
        raise UndefinedMetricError("no user has both logged negatives and validation positives")
    return hits / (k * users)


def hardness(model, users, negatives) -> float:
    """Mean sigmoid score of logged (user, negative) pairs; higher means harder."""
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise UndefinedMetricError("empty negative log")
    return float(sigmoid(model.score_pairs(users, np.asarray(negatives, dtype=np.int64))).mean())


def silhouette(x, labels, chunk: int = 2048) -> float:
    return float(silhouette_samples(x, labels, chunk).mean())


def silhouette_samples(x, labels, chunk: int = 2048) -> np.ndarray:
    """Per-point silhouette; points in singleton clusters get 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    k = uniq.size
    if k < 2 or x.shape[0] < 2:
        raise UndefinedMetricError("silhouette needs at least two non-empty clusters")
    sizes = np.bincount(lab, minlength=k).astype(np.float64)
    onehot = np.zeros((x.shape[0], k))
    onehot[np.arange(x.shape[0]), lab] = 1.0
    s = np.zeros(x.shape[0])
    sq = np.square(x).sum(1)
    for start in range(0, x.shape[0], chunk):
        sl = slice(start, start + chunk)
        d = np.sqrt(np.maximum(sq[sl, None] - 2.0 * x[sl] @ x.T + sq[None, :], 0.0))
        d[np.arange(d.shape[0]), np.arange(start, start + d.shape[0])] = 0.0
        sums = d @ onehot
        own = lab[sl]
        own_size = sizes[own]
        a = np.where(own_size > 1, sums[np.arange(d.shape[0]), own] / np.maximum(own_size - 1, 1), 0.0)
        mean_other = sums / sizes[None, :]
        mean_other[np.arange(d.shape[0]), own] = np.inf
        b = mean_other.min(1)
        denom = np.maximum(a, b)
        val = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
        s[sl] = np.where(own_size > 1, val, 0.0)
    return s


def calinski_harabasz(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    uniq, lab = np.unique(np.asarray(labels), return_inverse=True)
    n, k = x.shape[0], uniq.size
    if k < 2:
        raise UndefinedMetricError("Calinski-Harabasz needs at least two clusters")
    mean = x.mean(0)
    between = within = 0.0
    for c in range(k):
        pts = x[lab == c]
        centre = pts.mean(0)
        between += pts.shape[0] * float(np.square(centre - mean).sum())
        within += float(np.square(pts - centre).sum())
    if within == 0.0:
        return float("inf") if between > 0 else 0.0
    return between / within * (n - k) / (k - 1)


def clustering_quality(x, labels) -> tuple[float, float]:
    return silhouette(x, labels), calinski_harabasz(x, labels)


def exposure_realness(users, negatives, exposure) -> float:
    """Fraction of logged negatives the user was actually exposed to."""
    users = np.asarray(users, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if users.size == 0:
        raise UndefinedMetricError("empty negative log")
    if users.max() >= len(exposure.exposed) or users.min() < 0:
        raise UndefinedMetricError("user missing from exposure log")
    hits = [exposure.is_exposed(int(u), int(i)) for u, i in zip(users.tolist(), negatives.tolist())]
    return float(np.mean(hits))
