"""Batch loss with negative sampling, the epoch loop, early stopping, grid search."""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from cobrar import kernels
from cobrar.dataset import InteractionDataset, SplitDataset
from cobrar.models import ProfileModel, build_model, param_count
from cobrar.nncore import AdamState, adam_step, branch_backward, cosine, cosine_backward

log = logging.getLogger(__name__)

VAL_K = 5


class TrainingDiverged(FloatingPointError):
    """Loss or gradient went non-finite; ``train_log`` holds the epochs completed so far."""

    def __init__(self, message, train_log=None):
        super().__init__(message)
        self.train_log = train_log


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_weight: float = 1e-3
    batch_size: int = 256
    n_neg: int = 5
    mu: float = 1e-6
    dropout_rate: float = 0.1
    max_epochs: int = 100
    patience: int = 10
    embedding_dim: int = 128
    architecture: tuple[int, ...] = (2048,)
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "architecture", tuple(int(d) for d in self.architecture))
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.n_neg < 1:
            problems.append("n_neg must be >= 1")
        if not 0.0 < self.mu < 0.5:
            problems.append("mu must lie in (0, 0.5)")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            problems.append("patience must lie in [0, max_epochs]")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append("dropout_rate must lie in [0, 1)")
        if self.learning_rate <= 0 or self.l2_weight < 0:
            problems.append("learning_rate must be > 0 and l2_weight >= 0")
        if self.embedding_dim < 1 or any(d < 1 for d in self.architecture):
            problems.append("layer sizes must be positive")
        if self.dtype not in ("float64", "float32"):
            problems.append("dtype must be float64 or float32")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    @property
    def layer_sizes(self) -> list[int]:
        """Hidden sizes followed by the embedding dimension."""
        return [*self.architecture, self.embedding_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = list(self.architecture)
        return d


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_ndcg: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def best_val_ndcg(self) -> float:
        return self.val_ndcg[self.best_epoch - 1] if self.best_epoch else -math.inf

    def to_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_ndcg_at_5\tis_best"]
        for e, (loss, ndcg) in enumerate(zip(self.train_loss, self.val_ndcg), 1):
            lines.append(f"{e}\t{loss!r}\t{ndcg!r}\t{int(e == self.best_epoch)}")
        return "\n".join(lines) + "\n"


# -- negatives and loss ------------------------------------------------------

def sample_negatives_batch(ds: InteractionDataset, users, n_neg: int, rng: np.random.Generator) -> np.ndarray:
    """``n_neg`` uniform draws (with replacement) from each user's non-positive items."""
    users = np.asarray(users, dtype=np.int64)
    n_cand = ds.n_items - ds.user_degrees()[users]
    if (n_cand <= 0).any():
        bad = int(users[np.argmax(n_cand <= 0)])
        raise ValueError(f"user {bad} interacted with every item; no negatives to sample")
    draws = rng.integers(0, n_cand[:, None], size=(len(users), n_neg))
    return kernels.negative_lookup(ds.row_indptr, ds.row_indices, users, draws)


def sample_negatives(ds: InteractionDataset, i: int, n_neg: int, rng: np.random.Generator) -> list[int]:
    return sample_negatives_batch(ds, [i], n_neg, rng)[0].tolist()


def _clamp_terms(pos, neg, mu):
    """Per-score loss terms and their derivatives w.r.t. the raw scores."""
    lo, hi = mu, 1.0 - mu
    pc = np.clip(pos, lo, hi)
    nc = np.clip(neg, lo, hi)
    pos_in = (pos >= lo) & (pos <= hi)
    neg_in = (neg >= lo) & (neg <= hi)
    loss = -np.log(pc) - np.log1p(-nc).sum(axis=-1)
    dpos = np.where(pos_in, -1.0 / pc, 0.0)
    dneg = np.where(neg_in, 1.0 / (1.0 - nc), 0.0)
    return loss, dpos, dneg


def pair_loss(y_pos: float, y_negs: Sequence[float], mu: float = 1e-6) -> float:
    """``-ln y_pos - sum ln(1 - y_neg)`` with every score clamped to ``[mu, 1 - mu]``."""
    neg = np.asarray(list(y_negs), dtype=np.float64).reshape(1, -1)
    loss, _, _ = _clamp_terms(np.array([float(y_pos)]), neg, mu)
    return float(loss[0])


@dataclass
class BatchState:
    users: np.ndarray
    items: np.ndarray
    negatives: np.ndarray
    user_emb: np.ndarray
    item_emb: np.ndarray
    user_cache: object
    item_cache: object
    pos_scores: np.ndarray
    neg_scores: np.ndarray
    pair_losses: np.ndarray
    dpos: np.ndarray
    dneg: np.ndarray

    @property
    def loss(self) -> float:
        return float(self.pair_losses.sum())


def forward_batch(model: ProfileModel, ds: InteractionDataset, users, items, negatives,
                  mu: float, rng: np.random.Generator | None, train: bool = True) -> BatchState:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(users), -1)
    b, n = negatives.shape
    e_u, cu = model.embed_users(ds, users, train, rng)
    # positives first, then each pair's negatives in order
    e_t, ct = model.embed_items(ds, np.concatenate([items, negatives.ravel()]), train, rng)
    scores = cosine(np.concatenate([e_u, np.repeat(e_u, n, axis=0)]), e_t)
    pos, neg = scores[:b], scores[b:].reshape(b, n)
    losses, dpos, dneg = _clamp_terms(pos, neg, mu)
    return BatchState(users, items, negatives, e_u, e_t, cu, ct, pos, neg, losses, dpos, dneg)


def _backprop_side(model: ProfileModel, cache, grad: np.ndarray, ds: InteractionDataset,
                   grads: dict[str, np.ndarray]) -> None:
    if cache.side == "user":
        branch, proj_name, indptr, indices = model.user_branch, "f_u", ds.row_indptr, ds.row_indices
    else:
        branch, proj_name, indptr, indices = model.item_branch, "f_t", ds.col_indptr, ds.col_indices
    name = next(k for k, v in model.branches().items() if v is branch)
    layer_grads, gx = branch_backward(branch, cache.tape, grad)
    for idx, (dw, db) in enumerate(layer_grads):
        grads[f"{name}.{idx}.weight"] += dw
        grads[f"{name}.{idx}.bias"] += db
    kernels.csr_rows_rmatmul(indptr, indices, cache.index, gx, grads[f"{proj_name}.weight"])
    grads[f"{proj_name}.bias"] += gx.sum(axis=0)


def backward_batch(model: ProfileModel, ds: InteractionDataset, state: BatchState,
                   paths: Sequence[str] = ("user", "item")) -> dict[str, np.ndarray]:
    """Gradient of the summed batch loss.

    ``paths`` restricts backprop to the user and/or item embedding path; in
    CoBraR the shared branch gradient is the sum of the two single-path results.
    """
    b, n = state.negatives.shape
    u_rep = np.concatenate([state.user_emb, np.repeat(state.user_emb, n, axis=0)])
    dscore = np.concatenate([state.dpos, state.dneg.ravel()])
    g_u_rep, g_t = cosine_backward(u_rep, state.item_emb, dscore)
    g_u = g_u_rep[:b] + g_u_rep[b:].reshape(b, n, state.user_emb.shape[1]).sum(axis=1)
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    if "user" in paths:
        _backprop_side(model, state.user_cache, g_u, ds, grads)
    if "item" in paths:
        _backprop_side(model, state.item_cache, g_t, ds, grads)
    return grads


def batch_loss(model: ProfileModel, ds: InteractionDataset, batch, cfg: TrainConfig,
               rng: np.random.Generator, negatives=None) -> tuple[float, dict[str, np.ndarray]]:
    """Summed loss over a batch of positive ``(user, item)`` pairs and its gradient.

    Negatives are drawn from ``rng`` unless given explicitly as a
    ``(len(batch), n)`` array (``n`` may be 0).
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 2)
    if not len(batch):
        raise ValueError("empty batch")
    users, items = batch[:, 0], batch[:, 1]
    if negatives is None:
        negatives = sample_negatives_batch(ds, users, cfg.n_neg, rng)
    state = forward_batch(model, ds, users, items, negatives, cfg.mu, rng, train=True)
    return state.loss, backward_batch(model, ds, state)


# -- fitting -----------------------------------------------------------------

def fit(kind: str, split: SplitDataset, cfg: TrainConfig,
        on_epoch: Callable[[int, float, float], None] | None = None) -> tuple[ProfileModel, TrainLog]:
    """Train with Adam, validate NDCG@5 after every epoch, return the best-epoch model.

    Training stops once validation NDCG@5 has gone ``max(patience, 1)``
    epochs without a strict improvement.
    """
    from cobrar.evaluation import evaluate

    if split.val.n_interactions == 0:
        raise ValueError("validation split is empty; cannot select epochs")
    rng = np.random.default_rng(cfg.seed)
    model = build_model(kind, split.n_users, split.n_items, cfg.layer_sizes, cfg.dropout_rate,
                        cfg.mu, rng, np.dtype(cfg.dtype))
    params = model.parameters()
    opt = AdamState.for_params(params)
    users, items = split.train.pairs()
    positives = np.stack([users, items], axis=1)
    train_log = TrainLog()
    best_params = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(positives))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = positives[order[start:start + cfg.batch_size]]
            loss, grads = batch_loss(model, split.train, batch, cfg, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}", train_log)
            try:
                adam_step(params, grads, opt, cfg.learning_rate, cfg.l2_weight)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch starting {start}: {exc}", train_log) from exc
            total += loss
        val = evaluate(model, split, "val", VAL_K).mean_ndcg
        train_log.train_loss.append(total / len(positives))
        train_log.val_ndcg.append(val)
        if on_epoch is not None:
            on_epoch(epoch, train_log.train_loss[-1], val)
        log.debug("epoch %d loss %.6f val_ndcg@5 %.6f", epoch, train_log.train_loss[-1], val)
        if val > train_log.best_val_ndcg:
            train_log.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        elif epoch - train_log.best_epoch >= max(cfg.patience, 1):
            train_log.stopped_early = True
            break
    model.load_parameters(best_params)
    return model, train_log


# -- grid search -------------------------------------------------------------

TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))


def expand_grid(grid: dict[str, list], base: TrainConfig | None = None) -> list[TrainConfig]:
    """Cartesian product of ``grid`` (key -> candidate values) over ``base``.

    Keys vary in TrainConfig field order, first key slowest; this is also
    the lexicographic order used for tie-breaking.
    """
    base = base or TrainConfig()
    unknown = set(grid) - set(TRAIN_FIELDS)
    if unknown:
        raise KeyError(f"unknown grid keys: {sorted(unknown)}")
    keys = [k for k in TRAIN_FIELDS if k in grid]
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ValueError(f"grid value for {k!r} must be a non-empty list")
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = dict(zip(keys, combo))
        if "architecture" in values:
            values["architecture"] = tuple(values["architecture"])
        out.append(replace(base, **values))
    return out


def default_grid(kind: str) -> dict[str, list]:
    """The hyperparameter lattice used for CoBraR / DeepMF model selection."""
    return {
        "learning_rate": [1e-6, 1e-7],
        "l2_weight": [1e-2, 1e-3],
        "batch_size": [256],
        "n_neg": [5],
        "dropout_rate": [0.1, 0.5, 0.9] if kind == "cobrar" else [0.0],
        "max_epochs": [100],
        "patience": [10],
        "embedding_dim": [64, 128],
        "architecture": [[2048], [1024], [512], [256], [512, 512, 256, 256]],
    }


def _fit_only(kind, split, cfg):
    return fit(kind, split, cfg)[1]


@dataclass
class GridResult:
    best: TrainConfig
    configs: list[TrainConfig]
    logs: list[TrainLog]

    @property
    def best_index(self) -> int:
        return self.configs.index(self.best)


def select_best(kind: str, split: SplitDataset, configs: list[TrainConfig], logs: list[TrainLog]) -> TrainConfig:
    """Highest validation NDCG@5; ties go to fewer parameters, then lattice order."""
    def key(idx):
        cfg = configs[idx]
        total = param_count(cfg.layer_sizes, kind, split.n_users, split.n_items).total
        return (-logs[idx].best_val_ndcg, total, idx)

    return configs[min(range(len(configs)), key=key)]


def grid_search(split: SplitDataset, kind: str, grid: dict[str, list] | list[TrainConfig],
                base: TrainConfig | None = None, jobs: int = 1,
                runner: Callable | None = None) -> GridResult:
    """Train every lattice point and pick the best on validation.

    ``runner(kind, split, cfg) -> TrainLog`` defaults to :func:`fit`; with
    ``jobs > 1`` it must be picklable and runs in worker processes.
    """
    configs = list(grid) if isinstance(grid, list) else expand_grid(grid, base)
    if not configs:
        raise ValueError("empty hyperparameter lattice")
    runner = runner or _fit_only
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(runner, [kind] * len(configs), [split] * len(configs), configs))
    else:
        logs = [runner(kind, split, cfg) for cfg in configs]
    return GridResult(select_best(kind, split, configs, logs), configs, logs)
