"""Raw rating logs to DatasetBundle: parsing, binarization, k-core filtering, splitting.

Also hosts the synthetic generator whose exposure ground truth lets samplers be
scored for realness.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .data import DatasetBundle, IdMaps, Interactions

log = logging.getLogger(__name__)

FORMATS = ("movielens-tab", "movielens-double-colon", "generic-csv")

Pair = tuple[Hashable, Hashable]


class IngestError(ValueError):
    pass


class MalformedLineError(IngestError):
    def __init__(self, line_no: int, text: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {text!r}")
        self.line_no = line_no


class EmptyCoreError(IngestError):
    """k-core filtering removed every interaction."""


@dataclass
class RawRatings:
    users: list = field(default_factory=list)
    items: list = field(default_factory=list)
    ratings: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    malformed: list = field(default_factory=list)

    def __len__(self):
        return len(self.users)

    def __getitem__(self, k):
        return (self.users[k], self.items[k], self.ratings[k], self.timestamps[k])

    def append(self, user, item, rating: float, timestamp=None):
        if not math.isfinite(rating):
            raise ValueError(f"non-finite rating {rating!r}")
        self.users.append(user)
        self.items.append(item)
        self.ratings.append(float(rating))
        self.timestamps.append(timestamp)


def _parse_id(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def _parse_fields(fields: list[str], line_no: int, line: str):
    if len(fields) not in (3, 4):
        raise MalformedLineError(line_no, line, f"expected 3 or 4 fields, got {len(fields)}")
    try:
        rating = float(fields[2])
        ts = int(fields[3]) if len(fields) == 4 and fields[3].strip() else None
    except ValueError as exc:
        raise MalformedLineError(line_no, line, str(exc)) from None
    if not math.isfinite(rating):
        raise MalformedLineError(line_no, line, "non-finite rating")
    return _parse_id(fields[0]), _parse_id(fields[1]), rating, ts


def load_raw(path, fmt: str, strict: bool = True) -> RawRatings:
    """Parse a rating log.

    In strict mode the first malformed line aborts with its line number; otherwise
    malformed lines are skipped and recorded in ``RawRatings.malformed``.
    """
    if fmt not in FORMATS:
        raise IngestError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    path = Path(path)
    try:
        handle = path.open(encoding="latin-1", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    out = RawRatings()
    with handle:
        if fmt == "generic-csv":
            rows = csv.reader(handle)
            header = next(rows, None)
            if header is not None and [h.strip().lower() for h in header[:3]] != ["user", "item", "rating"]:
                raise MalformedLineError(1, ",".join(header), "generic-csv needs a user,item,rating header")
            numbered = ((n, row, ",".join(row)) for n, row in enumerate(rows, start=2))
        else:
            sep = "\t" if fmt == "movielens-tab" else "::"
            numbered = ((n, line.rstrip("\r\n").split(sep), line.rstrip("\r\n"))
                        for n, line in enumerate(handle, start=1) if line.strip())
        for line_no, fields, text in numbered:
            if not fields or all(not f.strip() for f in fields):
                continue
            try:
                out.append(*_parse_fields(fields, line_no, text))
            except MalformedLineError as exc:
                if strict:
                    raise
                out.malformed.append((line_no, text))
                log.warning("skipping %s", exc)
    return out


def binarize(raw: RawRatings) -> list[Pair]:
    """Keep pairs rated at least half the dataset's maximum rating.

    Duplicated (user, item) pairs are resolved by their last occurrence before
    thresholding. Output order is first-seen order of the surviving pairs.
    """
    if len(raw) == 0:
        raise IngestError("no ratings to binarize")
    threshold = 0.5 * max(raw.ratings)
    last: dict[Pair, float] = {}
    for u, i, r in zip(raw.users, raw.items, raw.ratings):
        last[(u, i)] = r
    return [pair for pair, r in last.items() if r >= threshold]


def kcore_filter(pairs: Sequence[Pair], k_user: int, k_item: int) -> list[Pair]:
    """Iteratively drop users with < k_user and items with < k_item pairs until stable."""
    if k_user < 1 or k_item < 1:
        raise ValueError("k_user and k_item must be >= 1")
    current = list(dict.fromkeys(pairs))
    while True:
        ucount = Counter(u for u, _ in current)
        icount = Counter(i for _, i in current)
        kept = [(u, i) for u, i in current if ucount[u] >= k_user and icount[i] >= k_item]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise EmptyCoreError(f"no interactions survive a ({k_user}, {k_item})-core")
    return current


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer part sizes summing to n, leftovers to the largest fractional parts."""
    quotas = [n * r for r in ratios]
    sizes = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split(pairs: Sequence[Pair], ratios=(0.8, 0.1, 0.1), seed: int = 0,
          maps: IdMaps | None = None) -> DatasetBundle:
    """Global random split of interactions into train/val/test.

    Ids are densified in first-seen order of ``pairs`` unless ``maps`` is given.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positives summing to 1, got {ratios}")
    if len(pairs) < 3:
        raise IngestError("need at least 3 pairs to split")
    if maps is None:
        maps = IdMaps.from_pairs(pairs)
    users = np.fromiter((maps.user_index[u] for u, _ in pairs), dtype=np.int64, count=len(pairs))
    items = np.fromiter((maps.item_index[i] for _, i in pairs), dtype=np.int64, count=len(pairs))
    perm = np.random.default_rng(seed).permutation(len(pairs))
    sizes = largest_remainder(len(pairs), ratios)
    bounds = np.cumsum([0] + sizes)
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = perm[a:b]
        parts.append(Interactions.from_arrays(users[idx], items[idx], maps.n_users, maps.n_items))
    return DatasetBundle(maps, *parts, split_seed=int(seed), split_ratios=ratios, source_nnz=len(pairs))


def prepare(path, fmt: str, k_user: int = 10, k_item: int = 10, seed: int = 0,
            ratios=(0.8, 0.1, 0.1), strict: bool = True) -> DatasetBundle:
    raw = load_raw(path, fmt, strict=strict)
    pairs = kcore_filter(binarize(raw), k_user, k_item)
    return split(pairs, ratios, seed)


@dataclass
class ExposureLog:
    """Ground-truth exposure sets (sorted item indices) and generator communities per user."""

    exposed: list
    community: np.ndarray

    def is_exposed(self, u: int, i: int) -> bool:
        row = self.exposed[u]
        k = np.searchsorted(row, i)
        return bool(k < row.size and row[k] == i)

    def save(self, path):
        with open(path, "w") as fh:
            for u, row in enumerate(self.exposed):
                fh.write(f"{u}\t{','.join(map(str, row.tolist()))}\n")

    @classmethod
    def load(cls, path, community=None) -> "ExposureLog":
        exposed = []
        for line in Path(path).read_text().splitlines():
            _, _, items = line.partition("\t")
            exposed.append(np.array([int(x) for x in items.split(",") if x], dtype=np.int64))
        if community is None:
            community = np.full(len(exposed), -1, dtype=np.int64)
        return cls(exposed, np.asarray(community, dtype=np.int64))


def community_blocks(n_items: int, n_communities: int, tail_fraction: float = 0.2):
    """Item layout of the synthetic generator: disjoint per-community blocks, then a shared tail."""
    n_tail = int(round(n_items * tail_fraction))
    per_block = (n_items - n_tail) // n_communities
    if per_block < 1:
        raise ValueError("too few items for the requested number of communities")
    blocks = [np.arange(p * per_block, (p + 1) * per_block) for p in range(n_communities)]
    tail = np.arange(n_communities * per_block, n_items)
    return blocks, tail


def generate_synthetic_exposure(n_users: int, n_items: int, n_communities: int,
                                exposure_rate: float, click_rate: float, seed: int,
                                ratios=(0.8, 0.1, 0.1),
                                tail_fraction: float = 0.2) -> tuple[DatasetBundle, ExposureLog]:
    """Community-structured exposure, then clicks among exposed items.

    Each community owns a disjoint block of items exposed to its members with
    ``exposure_rate``; a shared tail is exposed to everybody at ``exposure_rate / 4``.
    Items outside a user's block and the tail are never exposed to that user.
    """
    if min(n_users, n_items, n_communities) < 1:
        raise ValueError("counts must be >= 1")
    if not (0 < exposure_rate <= 1 and 0 < click_rate <= 1):
        raise ValueError("rates must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    blocks, tail = community_blocks(n_items, n_communities, tail_fraction)
    community = rng.integers(n_communities, size=n_users)
    exposed, pairs = [], []
    for u in range(n_users):
        block = blocks[community[u]]
        seen = np.r_[block[rng.random(block.size) < exposure_rate],
                     tail[rng.random(tail.size) < exposure_rate / 4]]
        seen.sort()
        exposed.append(seen)
        clicked = seen[rng.random(seen.size) < click_rate]
        pairs.extend((u, int(i)) for i in clicked)
    if len(pairs) < 3:
        raise IngestError("generator parameters produced (almost) no clicks")
    bundle = split(pairs, ratios, seed, maps=IdMaps.identity(n_users, n_items))
    return bundle, ExposureLog(exposed, community)
