"""Top-k ranking, accuracy and beyond-accuracy metrics, paired t-tests.

Anything exposing ``score_users(train_ds, users) -> (len(users), M) array``
can be evaluated: trained models, :class:`ScoreMatrix` (precomputed scores)
and :class:`PopularityScorer`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from cobrar import kernels
from cobrar.dataset import InteractionDataset, SplitDataset

DEFAULT_K = 5


class ScoreMatrix:
    """Fixed (N x M) score table behind the scorer interface."""

    kind = "scores"

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("score matrix must be 2-D")

    def score_users(self, ds, users):
        return self.scores[np.asarray(users, dtype=np.int64)]


class PopularityScorer:
    """Ranks every user's candidates by train-set interaction count."""

    kind = "popularity"

    def __init__(self, train: InteractionDataset):
        self.counts = train.item_degrees().astype(np.float64)

    def score_users(self, ds, users):
        return np.broadcast_to(self.counts, (len(users), len(self.counts)))


@dataclass
class RecommendationList:
    user: int
    items: np.ndarray
    scores: np.ndarray


def _scores(model, ds: InteractionDataset, users) -> np.ndarray:
    return np.asarray(model.score_users(ds, np.asarray(users, dtype=np.int64)))


def rank_top_k(scores: np.ndarray, exclude: InteractionDataset | tuple, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` per row of ``scores``, skipping excluded items.

    ``exclude`` is a CSR pair ``(indptr, indices)`` aligned with the rows, or
    an InteractionDataset whose rows match. Ties go to the lower item index.
    """
    if isinstance(exclude, InteractionDataset):
        indptr, indices = exclude.row_indptr, exclude.row_indices
    else:
        indptr, indices = exclude
    n_rows, n_items = scores.shape
    short = (n_items - np.diff(indptr)) < k
    if short.any():
        raise ValueError(f"row {int(np.argmax(short))} has fewer than k={k} candidate items")
    return kernels.topk_excluding(scores, indptr, indices, k)


def recommend(model, ds: InteractionDataset, i: int, k: int = DEFAULT_K,
              exclude: Iterable[int] = ()) -> RecommendationList:
    """Top-``k`` items for user ``i`` by descending score, never from ``exclude``."""
    if not 0 <= i < ds.n_users:
        raise IndexError(f"user index {i} out of range [0, {ds.n_users})")
    ex = np.unique(np.fromiter(exclude, dtype=np.int64))
    scores = _scores(model, ds, [i])
    items, vals = rank_top_k(scores, (np.array([0, len(ex)]), ex), k)
    return RecommendationList(i, items[0], vals[0])


def _disc(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))


def _ndcg_rows(hits: np.ndarray, n_relevant: np.ndarray) -> np.ndarray:
    k = hits.shape[1]
    disc = _disc(k)
    dcg = (hits * disc).sum(axis=1)
    ideal = np.concatenate([[0.0], np.cumsum(disc)])
    idcg = ideal[np.minimum(n_relevant, k)]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_relevant > 0, dcg / np.where(idcg > 0, idcg, 1.0), 0.0)


def ndcg_at_k(recs: RecommendationList | Sequence[int], relevant: Iterable[int], k: int | None = None) -> float:
    """Binary-relevance NDCG of one list; 0 when nothing is relevant."""
    items = np.asarray(recs.items if isinstance(recs, RecommendationList) else recs, dtype=np.int64)
    k = len(items) if k is None else k
    if k != len(items):
        raise ValueError(f"k={k} but the list holds {len(items)} items")
    relevant = set(int(j) for j in relevant)
    hits = np.array([[float(int(j) in relevant) for j in items]])
    return float(_ndcg_rows(hits, np.array([len(relevant)]))[0])


@dataclass
class PopularityTable:
    """Train interaction count per item and its short-head flag.

    The head is the shortest prefix of items, by descending count with ties
    to the lower index, whose cumulative share of train interactions is
    at least ``head_share``.
    """

    counts: np.ndarray
    is_head: np.ndarray

    @classmethod
    def from_train(cls, train: InteractionDataset, head_share: float = 0.8) -> "PopularityTable":
        counts = train.item_degrees().astype(np.int64)
        return cls.from_counts(counts, head_share)

    @classmethod
    def from_counts(cls, counts, head_share: float = 0.8) -> "PopularityTable":
        counts = np.asarray(counts, dtype=np.int64)
        order = np.lexsort((np.arange(len(counts)), -counts))
        total = counts.sum()
        is_head = np.zeros(len(counts), dtype=bool)
        if total > 0:
            # exact rational comparison so the 80% boundary is not subject to rounding
            share = Fraction(str(head_share))
            cum = np.cumsum(counts[order]) * share.denominator
            n_head = int(np.searchsorted(cum, share.numerator * total, side="left")) + 1
            is_head[order[:min(n_head, len(counts))]] = True
        return cls(counts, is_head)

    @property
    def head(self) -> np.ndarray:
        return np.flatnonzero(self.is_head)

    @property
    def tail(self) -> np.ndarray:
        return np.flatnonzero(~self.is_head)


def _as_item_matrix(recs) -> np.ndarray:
    if isinstance(recs, np.ndarray):
        return recs.astype(np.int64, copy=False).reshape(len(recs), -1)
    rows = [r.items if isinstance(r, RecommendationList) else r for r in recs]
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)


def arp(recs, popularity: PopularityTable | np.ndarray) -> np.ndarray:
    """Mean train popularity of each user's recommended items."""
    counts = popularity.counts if isinstance(popularity, PopularityTable) else np.asarray(popularity)
    items = _as_item_matrix(recs)
    return counts[items].astype(np.float64).mean(axis=1)


def coverage(recs, n_items: int) -> float:
    """Percentage of the catalogue recommended to at least one user."""
    items = _as_item_matrix(recs)
    return 100.0 * len(np.unique(items)) / n_items


def pop_rsp(recs, popularity: PopularityTable, head_candidates, tail_candidates) -> float:
    """Ranking-based statistical parity between short-head and long-tail items.

    ``P_g = sum_u |top-k(u) & g| / sum_u |candidates(u) & g|`` per group g;
    the result is ``std(P_head, P_tail) / mean(P_head, P_tail)`` (population std).
    """
    items = _as_item_matrix(recs)
    head_den = float(np.sum(head_candidates))
    tail_den = float(np.sum(tail_candidates))
    if not popularity.is_head.any() or popularity.is_head.all() or head_den <= 0 or tail_den <= 0:
        raise ValueError("PopRSP needs non-empty head and tail candidate groups")
    in_head = popularity.is_head[items]
    p = np.array([in_head.sum() / head_den, (~in_head).sum() / tail_den])
    mean = p.mean()
    return float(p.std() / mean) if mean > 0 else 0.0


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    corrected_alpha: float
    significant: bool


def paired_t_test(a, b, n_comparisons: int = 1, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test with a Bonferroni-corrected threshold ``alpha / n_comparisons``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("paired t-test needs at least two pairs")
    if n_comparisons < 1:
        raise ValueError("n_comparisons must be >= 1")
    d = a - b
    n = len(d)
    mean = math.fsum(d) / n
    sd = math.sqrt(math.fsum((d - mean) ** 2) / (n - 1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        p = 1.0 if mean == 0.0 else 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p = float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 1)))
    corrected = alpha / n_comparisons
    return TTestResult(t, p, corrected, p < corrected)


@dataclass
class EvalReport:
    phase: str
    k: int
    users: np.ndarray
    ndcg: np.ndarray
    arp: np.ndarray
    coverage: float
    pop_rsp: float
    recommendations: np.ndarray = field(repr=False)
    significance: dict = field(default_factory=dict)

    @property
    def mean_ndcg(self) -> float:
        return math.fsum(self.ndcg) / len(self.ndcg) if len(self.ndcg) else math.nan

    @property
    def mean_arp(self) -> float:
        return math.fsum(self.arp) / len(self.arp) if len(self.arp) else math.nan

    def per_user_csv(self) -> str:
        lines = ["user_index,ndcg_at_k,arp"]
        lines += [f"{u},{n!r},{a!r}" for u, n, a in zip(self.users.tolist(), self.ndcg.tolist(), self.arp.tolist())]
        return "\n".join(lines) + "\n"


def exclusion_for(split: SplitDataset, phase: str) -> InteractionDataset:
    """Known interactions hidden from ranking: train for val, train + val for test."""
    if phase == "val":
        return split.train
    if phase == "test":
        tu, ti = split.train.pairs()
        vu, vi = split.val.pairs()
        return InteractionDataset.from_pairs(np.concatenate([tu, vu]), np.concatenate([ti, vi]),
                                             split.n_users, split.n_items)
    raise ValueError(f"phase must be 'val' or 'test', got {phase!r}")


def evaluate(model, split: SplitDataset, phase: str = "test", k: int = DEFAULT_K,
             chunk: int = 1024) -> EvalReport:
    """Rank for every user with ground truth in ``phase`` and compute all metrics.

    Users without ground truth in the phase are skipped, not scored as zero.
    """
    exclude = exclusion_for(split, phase)
    truth = split.val if phase == "val" else split.test
    pop = PopularityTable.from_train(split.train)
    users = np.flatnonzero(truth.user_degrees() > 0)
    n_items = split.n_items
    item_emb = model.item_embeddings(split.train) if hasattr(model, "item_embeddings") else None
    recs = np.empty((len(users), k), dtype=np.int64)
    ndcg = np.empty(len(users))
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        if item_emb is not None:
            scores = model.score_users(split.train, block, item_emb)
        else:
            scores = _scores(model, split.train, block)
        ex_ptr = exclude.row_indptr
        sub_ptr = np.concatenate([[0], np.cumsum(ex_ptr[block + 1] - ex_ptr[block])])
        sub_idx = np.concatenate([exclude.row_indices[ex_ptr[u]:ex_ptr[u + 1]] for u in block]) \
            if len(block) else np.empty(0, np.int32)
        top, _ = rank_top_k(np.asarray(scores, dtype=np.float64), (sub_ptr, sub_idx), k)
        rel = np.zeros((len(block), n_items), dtype=bool)
        t_ptr = truth.row_indptr
        rows = np.repeat(np.arange(len(block)), t_ptr[block + 1] - t_ptr[block])
        cols = np.concatenate([truth.row_indices[t_ptr[u]:t_ptr[u + 1]] for u in block])
        rel[rows, cols] = True
        hits = np.take_along_axis(rel, top, axis=1).astype(np.float64)
        ndcg[start:start + len(block)] = _ndcg_rows(hits, truth.user_degrees()[block])
        recs[start:start + len(block)] = top
    n_ex_head = np.array([pop.is_head[exclude.user_items(u)].sum() for u in users], dtype=np.int64)
    n_ex = exclude.user_degrees()[users]
    head_cand = pop.is_head.sum() - n_ex_head
    tail_cand = (n_items - pop.is_head.sum()) - (n_ex - n_ex_head)
    try:
        rsp = pop_rsp(recs, pop, head_cand, tail_cand)
    except ValueError:
        rsp = math.nan
    return EvalReport(phase, k, users, ndcg, arp(recs, pop), coverage(recs, n_items) if len(users) else 0.0,
                      rsp, recs)
