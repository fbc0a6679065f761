"""Scoring backbones (MF and LightGCN), BPR loss with analytic gradients, and lazy Adam.

Parameters live in one ``(N + M) x D`` table: user rows first, then item rows.
For LightGCN the scoring embeddings are ``sum_k alpha_k A^k E0`` with ``A`` the
symmetrically normalised bipartite adjacency. ``A`` is symmetric, so the
gradient with respect to ``E0`` is the same propagation applied to the gradient
with respect to the output embeddings.
"""
from __future__ import annotations

import hashlib
import json
import struct
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import Interactions

BACKBONES = ("mf", "lightgcn")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, row: int):
        super().__init__(f"non-finite gradient in parameter row {row}")
        self.row = row


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "lightgcn"
    dim: int = 64
    n_layers: int = 2
    layer_weights: tuple | None = None
    reg: float = 1e-4
    lr: float = 1e-3
    init_scale: float = 0.1

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 0 <= self.n_layers <= 4:
            raise ValueError("n_layers must lie in [0, 4]")
        if self.layer_weights is not None and len(self.layer_weights) != self.n_layers + 1:
            raise ValueError("need one layer weight per propagation depth 0..K")

    def weights(self) -> np.ndarray:
        if self.layer_weights is not None:
            return np.asarray(self.layer_weights, dtype=np.float64)
        return np.full(self.n_layers + 1, 1.0 / (self.n_layers + 1))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EmbeddingState:
    n_users: int
    n_items: int
    table: np.ndarray
    m: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    step: int = 0

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def users(self) -> np.ndarray:
        return self.table[: self.n_users]

    @property
    def items(self) -> np.ndarray:
        return self.table[self.n_users:]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.n_users, self.n_items, self.table.copy(), self.m.copy(),
                              self.v.copy(), self.step)

    def reset_moments(self):
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.step = 0


def init_embeddings(n_users: int, n_items: int, dim: int, seed: int, scale: float = 0.1) -> EmbeddingState:
    if min(n_users, n_items, dim) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.0, size=(n_users + n_items, dim)) * scale
    return EmbeddingState(n_users, n_items, table, np.zeros_like(table), np.zeros_like(table))


class GraphOperator:
    """Symmetrically normalised bipartite adjacency, kept as its user-item block.

    ``block[u, i] = 1 / sqrt(d_u d_i)`` for every training pair; the full operator
    is ``[[0, block], [block.T, 0]]``.
    """

    def __init__(self, block: sp.csr_matrix, user_degree: np.ndarray, item_degree: np.ndarray):
        self.block = block.tocsr()
        self.block_t = self.block.T.tocsr()
        self.user_degree = user_degree
        self.item_degree = item_degree
        self.n_users, self.n_items = self.block.shape

    @property
    def size(self) -> int:
        return self.n_users + self.n_items

    def apply(self, x: np.ndarray) -> np.ndarray:
        n = self.n_users
        return np.vstack([self.block @ x[n:], self.block_t @ x[:n]])

    def to_dense(self) -> np.ndarray:
        n = self.n_users
        out = np.zeros((self.size, self.size))
        dense = self.block.toarray()
        out[:n, n:] = dense
        out[n:, :n] = dense.T
        return out

    def to_sparse(self) -> sp.csr_matrix:
        return sp.bmat([[None, self.block], [self.block_t, None]], format="csr")


def build_graph_operator(train: Interactions) -> GraphOperator:
    du = train.user_degrees().astype(np.float64)
    di = train.item_degrees().astype(np.float64)
    inv_u = np.zeros_like(du)
    inv_i = np.zeros_like(di)
    inv_u[du > 0] = du[du > 0] ** -0.5
    inv_i[di > 0] = di[di > 0] ** -0.5
    users, items = train.pairs()
    vals = inv_u[users] * inv_i[items]
    block = sp.csr_matrix((vals, (users, items)), shape=train.shape)
    return GraphOperator(block, du, di)


def propagate(table: np.ndarray, graph: GraphOperator | None, n_layers: int, weights=None) -> np.ndarray:
    """Layer-weighted sum of ``A^k E0`` for k = 0..n_layers."""
    if weights is None:
        weights = np.full(n_layers + 1, 1.0 / (n_layers + 1))
    if n_layers == 0 or graph is None:
        return weights[0] * table
    if graph.size != table.shape[0]:
        raise ValueError(f"graph has {graph.size} nodes, table has {table.shape[0]} rows")
    out = weights[0] * table
    layer = table
    for k in range(1, n_layers + 1):
        layer = graph.apply(layer)
        out += weights[k] * layer
    return out


class Recommender:
    """An embedding state bound to a backbone; caches the scoring embeddings."""

    def __init__(self, config: ModelConfig, state: EmbeddingState, graph: GraphOperator | None = None):
        if config.backbone == "lightgcn" and graph is None:
            raise ValueError("lightgcn needs a graph operator")
        self.config = config
        self.state = state
        self.graph = graph if config.backbone == "lightgcn" else None
        self._final = None

    @property
    def n_users(self) -> int:
        return self.state.n_users

    @property
    def n_items(self) -> int:
        return self.state.n_items

    def invalidate(self):
        self._final = None

    def final_embeddings(self) -> np.ndarray:
        if self._final is None:
            if self.config.backbone == "mf":
                self._final = self.state.table
            else:
                self._final = propagate(self.state.table, self.graph, self.config.n_layers,
                                        self.config.weights())
        return self._final

    def user_embeddings(self) -> np.ndarray:
        return self.final_embeddings()[: self.n_users]

    def item_embeddings(self) -> np.ndarray:
        return self.final_embeddings()[self.n_users:]

    def score(self, u: int, i: int) -> float:
        if not (0 <= u < self.n_users and 0 <= i < self.n_items):
            raise IndexError(f"pair ({u}, {i}) out of range ({self.n_users}, {self.n_items})")
        emb = self.final_embeddings()
        return float(emb[u] @ emb[self.n_users + i])

    def score_pairs(self, users, items) -> np.ndarray:
        emb = self.final_embeddings()
        return np.einsum("ij,ij->i", emb[users], emb[self.n_users + np.asarray(items)])

    def score_users(self, users) -> np.ndarray:
        """Dense (len(users), M) score matrix."""
        return self.user_embeddings()[users] @ self.item_embeddings().T


def score(model: Recommender, u: int, i: int) -> float:
    return model.score(u, i)


def bpr_loss(pos_scores, neg_scores, reg: float = 0.0, param_sq_norm: float = 0.0) -> float:
    """sum -ln sigmoid(pos - neg) + reg * ||theta||^2, via softplus to avoid overflow."""
    diff = np.asarray(pos_scores, dtype=np.float64) - np.asarray(neg_scores, dtype=np.float64)
    return float(np.logaddexp(0.0, -diff).sum() + reg * param_sq_norm)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass
class SparseGrad:
    rows: np.ndarray
    values: np.ndarray


def batch_loss(state: EmbeddingState, graph: GraphOperator | None, users, pos, neg,
               reg: float, n_layers: int = 0, weights=None) -> float:
    """Loss of a triplet batch; the L2 term covers the base rows each triplet touches."""
    n = state.n_users
    emb = propagate(state.table, graph, n_layers, weights) if graph is not None else state.table
    eu, ep, en = emb[users], emb[n + np.asarray(pos)], emb[n + np.asarray(neg)]
    t = state.table
    sq = (np.square(t[users]).sum() + np.square(t[n + np.asarray(pos)]).sum()
          + np.square(t[n + np.asarray(neg)]).sum())
    return bpr_loss((eu * ep).sum(1), (eu * en).sum(1), reg, sq)


def bpr_gradients(state: EmbeddingState, graph: GraphOperator | None, users, pos, neg,
                  reg: float, n_layers: int = 0, weights=None, final: np.ndarray | None = None):
    """Analytic gradient of ``batch_loss`` with respect to the base table.

    Returns ``(SparseGrad, loss)``. ``final`` may carry already-propagated
    embeddings for the current state to skip the forward pass.
    """
    users = np.asarray(users, dtype=np.int64)
    pos_rows = state.n_users + np.asarray(pos, dtype=np.int64)
    neg_rows = state.n_users + np.asarray(neg, dtype=np.int64)
    lightgcn = graph is not None
    if final is None:
        final = propagate(state.table, graph, n_layers, weights) if lightgcn else state.table
    eu, ep, en = final[users], final[pos_rows], final[neg_rows]
    diff = (eu * (ep - en)).sum(1)
    # d/d diff of -ln sigmoid(diff) = -sigmoid(-diff)
    coef = -sigmoid(-diff)[:, None]

    base = state.table
    sq = np.square(base[users]).sum() + np.square(base[pos_rows]).sum() + np.square(base[neg_rows]).sum()
    loss = bpr_loss((eu * ep).sum(1), (eu * en).sum(1), reg, sq)

    touched = np.concatenate([users, pos_rows, neg_rows])
    out_grad = np.concatenate([coef * (ep - en), coef * eu, -coef * eu])
    if lightgcn:
        if weights is None:
            weights = np.full(n_layers + 1, 1.0 / (n_layers + 1))
        g_base = propagate(_scatter_rows(touched, out_grad, base.shape[0]), graph, n_layers, weights)
        g_base += _scatter_rows(touched, 2.0 * reg * base[touched], base.shape[0])
        rows = np.flatnonzero(np.abs(g_base).sum(1) != 0.0)
        return SparseGrad(rows, g_base[rows]), loss

    out_grad += 2.0 * reg * base[touched]
    rows, inv = np.unique(touched, return_inverse=True)
    return SparseGrad(rows, _scatter_rows(inv, out_grad, rows.size)), loss


def _scatter_rows(index: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Dense ``out`` with ``out[index[k]] += values[k]`` (repeated indices accumulate)."""
    picker = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n_rows, index.size))
    return picker @ values


def adam_step(state: EmbeddingState, grad: SparseGrad, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> EmbeddingState:
    """Lazy Adam: moments and parameters change only on rows present in ``grad``.

    Bias correction uses the global step, which advances once per call.
    """
    g = grad.values
    if not np.all(np.isfinite(g)):
        bad = int(grad.rows[np.flatnonzero(~np.isfinite(g).all(axis=1))[0]])
        raise NonFiniteGradientError(bad)
    state.step += 1
    r = grad.rows
    m = beta1 * state.m[r] + (1.0 - beta1) * g
    v = beta2 * state.v[r] + (1.0 - beta2) * np.square(g)
    state.m[r] = m
    state.v[r] = v
    m_hat = m / (1.0 - beta1 ** state.step)
    v_hat = v / (1.0 - beta2 ** state.step)
    state.table[r] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# Checkpoint layout:
#   8 bytes  magic b"ICPNSCK1"
#   4 bytes  little-endian uint32 header length L
#   L bytes  UTF-8 JSON header (backbone, n_users, n_items, dim, n_layers, step,
#            seed, config_hash, byteorder, dtype)
#   N*D float64 user rows, then M*D float64 item rows, row-major, in the
#   byte order named by the header.
CKPT_MAGIC = b"ICPNSCK1"


def save_checkpoint(path, state: EmbeddingState, config: ModelConfig, seed: int | None = None,
                    extra: dict | None = None) -> Path:
    header = {
        "backbone": config.backbone,
        "n_users": state.n_users,
        "n_items": state.n_items,
        "dim": state.dim,
        "n_layers": config.n_layers,
        "step": state.step,
        "seed": seed,
        "config_hash": config.digest(),
        "byteorder": sys.byteorder,
        "dtype": "float64",
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(state.table, dtype=np.float64).tobytes())
    return path


def load_checkpoint(path) -> tuple[EmbeddingState, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    dtype = np.dtype("<f8" if header["byteorder"] == "little" else ">f8")
    rows = header["n_users"] + header["n_items"]
    table = np.frombuffer(raw[12 + hlen:], dtype=dtype).astype(np.float64).reshape(rows, header["dim"])
    state = EmbeddingState(header["n_users"], header["n_items"], table.copy(),
                           np.zeros_like(table), np.zeros_like(table), header["step"])
    return state, header
