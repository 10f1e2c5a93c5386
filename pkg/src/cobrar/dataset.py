"""Interaction data: parsing, binarization, k-core filtering, user-based splits.

An :class:`InteractionDataset` stores the binary matrix ``R`` twice, as a
row-major CSR (user profiles) and a column-major CSR (item profiles). Both
are built once and never mutated.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ParseError(ValueError):
    """Malformed raw input; ``lineno`` is 1-based."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class RawInteraction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")


def parse_movielens(path) -> list[RawInteraction]:
    """Read an ML-1M ``ratings.dat`` file (``UserID::MovieID::Rating::Timestamp``)."""
    out = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 '::'-separated fields, got {len(parts)}")
            user, item, rating, ts = parts
            try:
                out.append(RawInteraction(user, item, float(rating), int(ts)))
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    if not out:
        raise EmptyDatasetError(f"{path}: no interactions")
    return out


def parse_amazon(path) -> list[RawInteraction]:
    """Read an Amazon Reviews'18 ratings-only CSV (``item,user,rating,timestamp``)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for recno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if len(rec) != 4:
                raise ParseError(path, recno, f"expected 4 comma-separated fields, got {len(rec)}")
            item, user, rating, ts = rec
            try:
                out.append(RawInteraction(user, item, float(rating), int(ts)))
            except ValueError as exc:
                raise ParseError(path, recno, str(exc)) from None
    if not out:
        raise EmptyDatasetError(f"{path}: no interactions")
    return out


def _csr(major: np.ndarray, minor: np.ndarray, n_major: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((minor, major))
    indptr = np.zeros(n_major + 1, dtype=np.int64)
    np.cumsum(np.bincount(major, minlength=n_major), out=indptr[1:])
    return indptr, np.ascontiguousarray(minor[order], dtype=np.int32)


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Binary user-item matrix with row and column access.

    ``user_ids[i]`` / ``item_ids[j]`` are the source tokens of dense index
    ``i`` / ``j``. Build through :meth:`from_pairs`, which deduplicates.
    """

    n_users: int
    n_items: int
    row_indptr: np.ndarray
    row_indices: np.ndarray
    col_indptr: np.ndarray
    col_indices: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    _user_lookup: dict = field(default=None, repr=False, compare=False)
    _item_lookup: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def from_pairs(cls, users, items, n_users: int, n_items: int,
                   user_ids: Sequence[str] | None = None,
                   item_ids: Sequence[str] | None = None) -> "InteractionDataset":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.shape != items.shape:
            raise ValueError("users and items must have the same length")
        if len(users) and (users.min() < 0 or users.max() >= n_users
                           or items.min() < 0 or items.max() >= n_items):
            raise IndexError("interaction index out of range")
        keys = np.unique(users * n_items + items)
        users, items = keys // n_items, keys % n_items
        row_indptr, row_indices = _csr(users, items, n_users)
        col_indptr, col_indices = _csr(items, users, n_items)
        for a in (row_indptr, row_indices, col_indptr, col_indices):
            a.setflags(write=False)
        user_ids = tuple(user_ids) if user_ids is not None else tuple(str(i) for i in range(n_users))
        item_ids = tuple(item_ids) if item_ids is not None else tuple(str(j) for j in range(n_items))
        if len(user_ids) != n_users or len(item_ids) != n_items:
            raise ValueError("id maps must match n_users / n_items")
        return cls(n_users, n_items, row_indptr, row_indices, col_indptr, col_indices,
                   user_ids, item_ids)

    @property
    def n_interactions(self) -> int:
        return int(self.row_indptr[-1])

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All (user, item) pairs, sorted by user then item."""
        users = np.repeat(np.arange(self.n_users, dtype=np.int64), np.diff(self.row_indptr))
        return users, self.row_indices.astype(np.int64)

    def user_items(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_users:
            raise IndexError(f"user index {i} out of range [0, {self.n_users})")
        return self.row_indices[self.row_indptr[i]:self.row_indptr[i + 1]]

    def item_users(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_items:
            raise IndexError(f"item index {j} out of range [0, {self.n_items})")
        return self.col_indices[self.col_indptr[j]:self.col_indptr[j + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.row_indptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.col_indptr)

    def user_index(self, token: str) -> int:
        if self._user_lookup is None:
            object.__setattr__(self, "_user_lookup", {t: i for i, t in enumerate(self.user_ids)})
        return self._user_lookup[token]

    def item_index(self, token: str) -> int:
        if self._item_lookup is None:
            object.__setattr__(self, "_item_lookup", {t: j for j, t in enumerate(self.item_ids)})
        return self._item_lookup[token]

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_users, self.n_items), dtype=np.int8)
        users, items = self.pairs()
        dense[users, items] = 1
        return dense

    def same_interactions(self, other: "InteractionDataset") -> bool:
        return (self.n_users == other.n_users and self.n_items == other.n_items
                and np.array_equal(self.row_indptr, other.row_indptr)
                and np.array_equal(self.row_indices, other.row_indices))


def user_profile(ds: InteractionDataset, i: int) -> dict[int, int]:
    """Sparse indicator of user ``i``'s items as ``{item: 1}``."""
    return {int(j): 1 for j in ds.user_items(i)}


def item_profile(ds: InteractionDataset, j: int) -> dict[int, int]:
    return {int(i): 1 for i in ds.item_users(j)}


def binarize_and_dedup(raw: Iterable[RawInteraction]) -> InteractionDataset:
    """Every distinct (user, item) pair becomes one positive, whatever its rating.

    Dense indices follow first appearance of each token.
    """
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users, items = [], []
    for r in raw:
        users.append(user_map.setdefault(r.user_id, len(user_map)))
        items.append(item_map.setdefault(r.item_id, len(item_map)))
    if not users:
        raise EmptyDatasetError("no interactions to binarize")
    return InteractionDataset.from_pairs(users, items, len(user_map), len(item_map),
                                         list(user_map), list(item_map))


def k_core_filter(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    users, items = ds.pairs()
    keep = np.ones(len(users), dtype=bool)
    while True:
        u_deg = np.bincount(users[keep], minlength=ds.n_users)
        i_deg = np.bincount(items[keep], minlength=ds.n_items)
        new_keep = keep & (u_deg[users] >= k) & (i_deg[items] >= k)
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    if not keep.any():
        raise EmptyDatasetError("k-core eliminated all data")
    users, items = users[keep], items[keep]
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    # np.unique is sorted, so re-densifying preserves relative order
    u_new = np.searchsorted(kept_users, users)
    i_new = np.searchsorted(kept_items, items)
    return InteractionDataset.from_pairs(
        u_new, i_new, len(kept_users), len(kept_items),
        [ds.user_ids[u] for u in kept_users], [ds.item_ids[j] for j in kept_items],
    )


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Per-user train/validation/test partition.

    ``train`` carries the full user and item index space, so items whose
    interactions all landed in val/test have empty train profiles.
    """

    train: InteractionDataset
    val: InteractionDataset
    test: InteractionDataset
    seed: int

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def fingerprint(self) -> dict:
        total = self.train.n_interactions + self.val.n_interactions + self.test.n_interactions
        return {"n_users": self.n_users, "n_items": self.n_items,
                "n_interactions": total, "split_seed": self.seed}


def _split_counts(n: int, ratios) -> tuple[int, int]:
    # tolerance guards against e.g. 0.1 * 30 landing a hair under 3
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    return n_val, n_test


def split_user_based(ds: InteractionDataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitDataset:
    """Shuffle each user's items with a generator seeded by ``(seed, user)``.

    The first ``floor(test*n)`` go to test, the next ``floor(val*n)`` to
    validation and the remainder to train, so every train profile is non-empty.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for u in range(ds.n_users):
        items = ds.user_items(u)
        n = len(items)
        perm = items[np.random.default_rng([seed, u]).permutation(n)]
        n_val, n_test = _split_counts(n, ratios)
        for name, chunk in (("test", perm[:n_test]),
                            ("val", perm[n_test:n_test + n_val]),
                            ("train", perm[n_test + n_val:])):
            parts[name][0].append(np.full(len(chunk), u, dtype=np.int64))
            parts[name][1].append(chunk)
    built = {}
    for name, (us, its) in parts.items():
        us = np.concatenate(us) if us else np.empty(0, np.int64)
        its = np.concatenate(its) if its else np.empty(0, np.int64)
        built[name] = InteractionDataset.from_pairs(us, its, ds.n_users, ds.n_items,
                                                    ds.user_ids, ds.item_ids)
    return SplitDataset(built["train"], built["val"], built["test"], seed)


def make_block_dataset(n_users: int = 200, n_items: int = 100, n_blocks: int = 4,
                       p_in: float = 0.5, p_out: float = 0.02, seed: int = 0) -> InteractionDataset:
    """Synthetic data with ``n_blocks`` user/item communities.

    User ``u`` belongs to block ``u * n_blocks // n_users`` (items likewise);
    a pair interacts with probability ``p_in`` inside its block and ``p_out``
    across blocks. Entities that end up with no interactions are dropped.
    """
    rng = np.random.default_rng(seed)
    ub = np.arange(n_users) * n_blocks // n_users
    ib = np.arange(n_items) * n_blocks // n_items
    prob = np.where(ub[:, None] == ib[None, :], p_in, p_out)
    users, items = np.nonzero(rng.random((n_users, n_items)) < prob)
    raw = [RawInteraction(f"u{u}", f"i{j}", 1.0) for u, j in zip(users, items)]
    return binarize_and_dedup(raw)


# -- preprocessed cache ------------------------------------------------------

INTERACTIONS_FILE = "interactions.txt"
SPLIT_FILE = "split.txt"
IDS_FILE = "ids.tsv"


def write_cache(split: SplitDataset, directory) -> None:
    """Write the text cache: interactions, per-interaction split tags, id maps.

    Output is a pure function of ``split``; reruns are byte-identical.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for tag, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        us, its = part.pairs()
        rows.append(np.stack([us, its, np.full(len(us), {"train": 0, "val": 1, "test": 2}[tag])], 1))
    allrows = np.concatenate(rows)
    allrows = allrows[np.lexsort((allrows[:, 1], allrows[:, 0]))]
    tags = ("train", "val", "test")
    with open(directory / INTERACTIONS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{split.n_users} {split.n_items} {len(allrows)}\n")
        fh.writelines(f"{u} {j}\n" for u, j, _ in allrows.tolist())
    with open(directory / SPLIT_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"seed {split.seed}\n")
        fh.writelines(f"{u} {j} {tags[t]}\n" for u, j, t in allrows.tolist())
    with open(directory / IDS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("kind\tindex\ttoken\n")
        fh.writelines(f"user\t{i}\t{t}\n" for i, t in enumerate(split.train.user_ids))
        fh.writelines(f"item\t{j}\t{t}\n" for j, t in enumerate(split.train.item_ids))


def read_cache(directory) -> SplitDataset:
    directory = Path(directory)
    with open(directory / INTERACTIONS_FILE, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ParseError(directory / INTERACTIONS_FILE, 1, "expected 'n_users n_items n_interactions'")
        n_users, n_items, n_inter = map(int, header)
        pairs = np.loadtxt(fh, dtype=np.int64, ndmin=2).reshape(-1, 2)
    if len(pairs) != n_inter:
        raise ValueError(f"{directory / INTERACTIONS_FILE}: header says {n_inter} interactions, found {len(pairs)}")
    with open(directory / SPLIT_FILE, encoding="utf-8") as fh:
        first = fh.readline().split()
        if len(first) != 2 or first[0] != "seed":
            raise ParseError(directory / SPLIT_FILE, 1, "expected 'seed <int>'")
        seed = int(first[1])
        recs = [line.split() for line in fh if line.strip()]
    if len(recs) != n_inter:
        raise ValueError(f"{directory / SPLIT_FILE}: expected {n_inter} tagged interactions, found {len(recs)}")
    tagged = np.array([[int(u), int(j)] for u, j, _ in recs], dtype=np.int64).reshape(-1, 2)
    if not np.array_equal(tagged, pairs):
        raise ValueError("split sidecar does not match interaction cache")
    tags = np.array([t for _, _, t in recs])
    user_ids = [str(i) for i in range(n_users)]
    item_ids = [str(j) for j in range(n_items)]
    ids_path = directory / IDS_FILE
    if ids_path.exists():
        with open(ids_path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                kind, idx, token = line.rstrip("\n").split("\t")
                (user_ids if kind == "user" else item_ids)[int(idx)] = token
    parts = {}
    for tag in ("train", "val", "test"):
        sel = tags == tag
        parts[tag] = InteractionDataset.from_pairs(pairs[sel, 0], pairs[sel, 1], n_users, n_items,
                                                   user_ids, item_ids)
    return SplitDataset(parts["train"], parts["val"], parts["test"], seed)
