"""User communities from pretrained embeddings and their smoothed item popularity."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Interactions
from .sampler import WeightedTable, smoothed_counts


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.square(x).sum(1)[:, None] - 2.0 * x @ centroids.T + np.square(centroids).sum(1)[None, :])
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a centre; take unused indices in order
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]]).ravel())
    return x[chosen].copy()


def kmeans_objective(x: np.ndarray, assignment: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.square(x - centroids[assignment]).sum())


def cluster_users(embeddings, n_clusters: int, seed: int, max_iter: int = 100, tol: float = 1e-6,
                  history: list | None = None):
    """k-means (Lloyd) with k-means++ seeding; returns ``(assignment, centroids)``.

    Empty clusters are reseeded at the point farthest from its own centroid. The
    returned assignment maps every point to its nearest returned centroid, with
    ties resolved to the lowest cluster index. When ``history`` is given the
    objective after each assignment and each update step is appended to it.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, n_clusters, rng)
    objective_trace = history if history is not None else []

    assignment = np.argmin(_sq_dists(x, centroids), axis=1)
    objective_trace.append(kmeans_objective(x, assignment, centroids))
    for _ in range(max_iter):
        new = np.zeros_like(centroids)
        counts = np.bincount(assignment, minlength=n_clusters)
        np.add.at(new, assignment, x)
        filled = counts > 0
        new[filled] /= counts[filled, None]
        for c in np.flatnonzero(~filled):
            far = np.square(x - new[assignment]).sum(1)
            far[counts[assignment] <= 1] = -1.0
            p = int(np.argmax(far))
            counts[assignment[p]] -= 1
            counts[c] = 1
            assignment[p] = c
            new[c] = x[p]
        shift = float(np.sqrt(np.square(new - centroids).sum(1)).max())
        centroids = new
        objective_trace.append(kmeans_objective(x, assignment, centroids))
        assignment = np.argmin(_sq_dists(x, centroids), axis=1)
        objective_trace.append(kmeans_objective(x, assignment, centroids))
        if shift < tol:
            break
    return assignment.astype(np.int64), centroids


def community_popularity(assignment, train: Interactions, n_communities: int | None = None) -> np.ndarray:
    """(P, M) matrix: number of community members who interacted with each item."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.size != train.n_users:
        raise ValueError("assignment must cover every user")
    p = int(assignment.max()) + 1 if n_communities is None else n_communities
    users, items = train.pairs()
    out = np.zeros((p, train.n_items), dtype=np.int64)
    np.add.at(out, (assignment[users], items), 1)
    return out


def smooth_popularity(counts, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return smoothed_counts(counts, alpha)


def build_community_tables(smoothed) -> tuple[list[WeightedTable | None], list[int]]:
    """One alias table per community row; all-zero rows are flagged instead."""
    tables, flagged = [], []
    for p, row in enumerate(np.atleast_2d(smoothed)):
        table = WeightedTable(row)
        if table.empty:
            flagged.append(p)
            tables.append(None)
        else:
            tables.append(table)
    return tables, flagged


@dataclass
class CommunityModel:
    n_communities: int
    alpha: float
    seed: int | None
    assignment: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray
    smoothed: np.ndarray

    @property
    def flagged(self) -> list[int]:
        return [p for p, row in enumerate(self.smoothed) if not (row > 0).any()]

    def tables(self):
        return build_community_tables(self.smoothed)[0]

    def save(self, path) -> Path:
        """Header line, one assignment line, then one sparse ``item:count`` row per community."""
        path = Path(path)
        header = {"P": self.n_communities, "alpha": self.alpha, "seed": self.seed,
                  "n_users": int(self.assignment.size), "n_items": int(self.counts.shape[1]),
                  "dim": int(self.centroids.shape[1])}
        lines = [json.dumps(header, sort_keys=True), " ".join(map(str, self.assignment.tolist()))]
        for row in self.counts:
            nz = np.flatnonzero(row)
            lines.append(" ".join(f"{j}:{row[j]}" for j in nz.tolist()))
        for c in self.centroids:
            lines.append(" ".join(repr(float(x)) for x in c))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CommunityModel":
        lines = Path(path).read_text().split("\n")
        header = json.loads(lines[0])
        p, m = header["P"], header["n_items"]
        assignment = np.array([int(x) for x in lines[1].split()], dtype=np.int64)
        counts = np.zeros((p, m), dtype=np.int64)
        for r in range(p):
            for tok in lines[2 + r].split():
                j, c = tok.split(":")
                counts[r, int(j)] = int(c)
        centroids = np.array([[float(x) for x in lines[2 + p + r].split()] for r in range(p)])
        centroids = centroids.reshape(p, header["dim"])
        return cls(p, header["alpha"], header["seed"], assignment, centroids, counts,
                   smooth_popularity(counts, header["alpha"]))

    def export_assignment(self, path):
        with open(path, "w") as fh:
            for u, c in enumerate(self.assignment.tolist()):
                fh.write(f"{u}\t{c}\n")


def build_community_model(user_embeddings, train: Interactions, n_communities: int, alpha: float,
                          seed: int, max_iter: int = 100, tol: float = 1e-6) -> CommunityModel:
    assignment, centroids = cluster_users(user_embeddings, n_communities, seed, max_iter, tol)
    counts = community_popularity(assignment, train, n_communities)
    return CommunityModel(n_communities, alpha, seed, assignment, centroids, counts,
                          smooth_popularity(counts, alpha))
