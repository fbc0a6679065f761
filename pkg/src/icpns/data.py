"""Shared data model: ID maps, compressed interaction matrices and split bundles."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class IdMaps:
    """Bijection between external user/item ids and dense zero-based indices.

    Indices are assigned in first-seen order; ``user_ids[k]`` is the external id
    of user index ``k``.
    """

    user_ids: tuple
    item_ids: tuple
    user_index: dict = field(init=False, repr=False, compare=False)
    item_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "user_index", {u: k for k, u in enumerate(self.user_ids)})
        object.__setattr__(self, "item_index", {i: k for k, i in enumerate(self.item_ids)})
        if len(self.user_index) != len(self.user_ids):
            raise ValueError("duplicate external user id")
        if len(self.item_index) != len(self.item_ids):
            raise ValueError("duplicate external item id")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Hashable, Hashable]]) -> "IdMaps":
        users = dict.fromkeys(u for u, _ in pairs)
        items = dict.fromkeys(i for _, i in pairs)
        return cls(tuple(users), tuple(items))

    @classmethod
    def identity(cls, n_users: int, n_items: int) -> "IdMaps":
        return cls(tuple(range(n_users)), tuple(range(n_items)))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def to_json(self) -> dict:
        return {"users": list(self.user_ids), "items": list(self.item_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "IdMaps":
        return cls(tuple(obj["users"]), tuple(obj["items"]))


class Interactions:
    """Binary user-item matrix in compressed per-user (CSR) form.

    ``indices[indptr[u]:indptr[u + 1]]`` is the sorted item list of user ``u``.
    Instances are treated as immutable; the arrays are made read-only.
    """

    def __init__(self, indptr, indices, n_users: int, n_items: int):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self._keys = None

    @classmethod
    def from_arrays(cls, users, items, n_users: int, n_items: int) -> "Interactions":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size:
            if users.min() < 0 or users.max() >= n_users:
                raise ValueError("user index out of range")
            if items.min() < 0 or items.max() >= n_items:
                raise ValueError("item index out of range")
        keys = np.unique(users * n_items + items)
        u = keys // n_items
        indptr = np.zeros(n_users + 1, dtype=np.int64)
        np.cumsum(np.bincount(u, minlength=n_users), out=indptr[1:])
        return cls(indptr, keys % n_items, n_users, n_items)

    @classmethod
    def empty(cls, n_users: int, n_items: int) -> "Interactions":
        return cls(np.zeros(n_users + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), n_users, n_items)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_users, self.n_items)

    def items_of(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self, u: int) -> int:
        return int(self.indptr[u + 1] - self.indptr[u])

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_items)

    def user_of_entries(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_users, dtype=np.int64), self.user_degrees())

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (users, items) arrays sorted by (user, item)."""
        return self.user_of_entries(), self.indices.copy()

    def contains(self, u: int, i: int) -> bool:
        row = self.items_of(u)
        k = np.searchsorted(row, i)
        return bool(k < row.size and row[k] == i)

    def contains_many(self, users, items) -> np.ndarray:
        """Vectorised membership test ``x_ui == 1`` via binary search on row-major keys."""
        if self._keys is None:
            self._keys = self.user_of_entries() * self.n_items + self.indices
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if self._keys.size == 0:
            return np.zeros(q.shape, dtype=bool)
        pos = np.searchsorted(self._keys, q)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == q

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.int8)
        u, i = self.pairs()
        out[u, i] = 1
        return out

    def to_csr(self):
        import scipy.sparse as sp

        data = np.ones(self.nnz, dtype=np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def union(self, other: "Interactions") -> "Interactions":
        if other.shape != self.shape:
            raise ValueError("shape mismatch")
        u1, i1 = self.pairs()
        u2, i2 = other.pairs()
        return Interactions.from_arrays(np.r_[u1, u2], np.r_[i1, i2], *self.shape)

    def __eq__(self, other):
        if not isinstance(other, Interactions):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self):
        return f"Interactions(n_users={self.n_users}, n_items={self.n_items}, nnz={self.nnz})"


@dataclass(frozen=True)
class DatasetBundle:
    maps: IdMaps
    train: Interactions
    val: Interactions
    test: Interactions
    split_seed: int
    split_ratios: tuple[float, float, float]
    source_nnz: int | None = None

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def split(self, name: str) -> Interactions:
        return getattr(self, name)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "nnz": {name: self.split(name).nnz for name in SPLIT_NAMES},
            "source_nnz": self.source_nnz,
            "split_seed": self.split_seed,
            "split_ratios": list(self.split_ratios),
        }

    def canonical_files(self) -> dict[str, bytes]:
        """Byte content of every file in the on-disk form, keyed by file name."""
        files = {
            "header.json": (json.dumps(self.header(), sort_keys=True, indent=1) + "\n").encode(),
            "ids.json": (json.dumps(self.maps.to_json(), sort_keys=True) + "\n").encode(),
        }
        for name in SPLIT_NAMES:
            u, i = self.split(name).pairs()
            text = "".join(f"{a}\t{b}\n" for a, b in zip(u.tolist(), i.tolist()))
            files[f"{name}.tsv"] = text.encode()
        return files

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, blob in self.canonical_files().items():
            (directory / name).write_bytes(blob)
        return directory

    @classmethod
    def load(cls, directory) -> "DatasetBundle":
        directory = Path(directory)
        header = json.loads((directory / "header.json").read_text())
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported bundle format {header['format_version']}")
        maps = IdMaps.from_json(json.loads((directory / "ids.json").read_text()))
        n, m = header["n_users"], header["n_items"]
        splits = {}
        for name in SPLIT_NAMES:
            raw = np.loadtxt(directory / f"{name}.tsv", dtype=np.int64, delimiter="\t", ndmin=2)
            if raw.size == 0:
                splits[name] = Interactions.empty(n, m)
            else:
                splits[name] = Interactions.from_arrays(raw[:, 0], raw[:, 1], n, m)
        return cls(maps, splits["train"], splits["val"], splits["test"],
                   header["split_seed"], tuple(header["split_ratios"]), header.get("source_nnz"))


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    where: tuple = ()


def validate_bundle(bundle: DatasetBundle) -> list[Violation]:
    """Collect every invariant violation of ``bundle``; an empty list means valid."""
    out: list[Violation] = []
    maps = bundle.maps
    shape = (maps.n_users, maps.n_items)
    for name in SPLIT_NAMES:
        part = bundle.split(name)
        if part.shape != shape:
            out.append(Violation("shape", f"{name} has shape {part.shape}, maps give {shape}", (name,)))
        if part.indptr.size != part.n_users + 1 or part.indptr[0] != 0 or part.indptr[-1] != part.nnz:
            out.append(Violation("nnz", f"{name} indptr inconsistent with nnz={part.nnz}", (name,)))
            continue
        if part.nnz and (part.indices.min() < 0 or part.indices.max() >= part.n_items):
            bad = np.flatnonzero((part.indices < 0) | (part.indices >= part.n_items))
            us = part.user_of_entries()
            for k in bad:
                out.append(Violation("range", f"{name} item index out of range",
                                     (int(us[k]), int(part.indices[k]))))
        for u in range(part.n_users):
            row = part.items_of(u)
            if row.size > 1:
                steps = np.diff(row)
                if (steps == 0).any():
                    dup = row[1:][steps == 0]
                    for i in dup:
                        out.append(Violation("duplicate", f"{name} repeats pair", (u, int(i))))
                if (steps < 0).any():
                    out.append(Violation("ordering", f"{name} user {u} list not sorted", (u,)))

    seen: dict[tuple[int, int], str] = {}
    for name in SPLIT_NAMES:
        part = bundle.split(name)
        us, its = part.user_of_entries(), part.indices
        for u, i in zip(us.tolist(), its.tolist()):
            other = seen.get((u, i))
            if other is not None and other != name:
                out.append(Violation("overlap", f"pair in both {other} and {name}", (u, i)))
            else:
                seen[(u, i)] = name

    ratios = bundle.split_ratios
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        out.append(Violation("ratios", f"split ratios {ratios} are not three non-negatives summing to 1"))
    if bundle.source_nnz is not None:
        total = sum(bundle.split(name).nnz for name in SPLIT_NAMES)
        if total != bundle.source_nnz:
            out.append(Violation("nnz", f"splits hold {total} pairs, source had {bundle.source_nnz}"))
    return out
