"""Small feed-forward kernel with hand-written backprop and Adam.

Everything operates on batches: a 1-D input is treated as a batch of one.
Within a :class:`Branch` dropout hits each layer's input (train mode only)
and ReLU follows every layer but the last, so embeddings may be negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cobrar import kernels

EPS_NORM = 1e-12


@dataclass(eq=False)
class LinearLayer:
    """``y = x @ weight + bias`` with ``weight`` of shape (d_in, d_out)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @classmethod
    def glorot(cls, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64) -> "LinearLayer":
        bound = np.sqrt(6.0 / (d_in + d_out))
        weight = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
        return cls(np.ascontiguousarray(weight), np.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


class Branch:
    """Stack of linear layers over sizes ``[d_1, ..., d_L]``.

    A single size means no layers: the branch is the identity on ``d_1``.
    """

    def __init__(self, layers: list[LinearLayer], dropout_rate: float = 0.0, dim: int | None = None):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        for a, b in zip(layers, layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer dimensions do not chain: {a.d_out} -> {b.d_in}")
        if not layers and dim is None:
            raise ValueError("an empty branch needs an explicit dim")
        self.layers = layers
        self.dropout_rate = float(dropout_rate)
        self._dim = dim

    @classmethod
    def build(cls, sizes, dropout_rate: float, rng: np.random.Generator, dtype=np.float64) -> "Branch":
        sizes = [int(s) for s in sizes]
        if not sizes or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        layers = [LinearLayer.glorot(a, b, rng, dtype) for a, b in zip(sizes, sizes[1:])]
        return cls(layers, dropout_rate, dim=sizes[0])

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in if self.layers else self._dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out if self.layers else self._dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.d_out for layer in self.layers]


@dataclass
class _LayerRecord:
    x: np.ndarray            # layer input after dropout
    mask: np.ndarray | None  # scaled dropout mask, None when dropout inactive
    active: np.ndarray | None  # ReLU gate, None on the last layer


@dataclass
class Tape:
    """Activations and dropout masks from one train-mode forward pass."""

    branch: Branch | None = None
    records: list[_LayerRecord] = field(default_factory=list)
    squeeze: bool = False
    consumed: bool = False

    def clear(self):
        self.branch = None
        self.records = []
        self.consumed = False


def _as_batch(x):
    x = np.asarray(x)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1 - rate) scaled by ``1 / (1 - rate)``."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


def branch_forward(b: Branch, x, train: bool = False, rng: np.random.Generator | None = None,
                   tape: Tape | None = None) -> np.ndarray:
    x, squeeze = _as_batch(x)
    if x.shape[1] != b.in_dim:
        raise ValueError(f"input dimension {x.shape[1]} != branch input {b.in_dim}")
    use_dropout = train and b.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    if tape is not None:
        tape.clear()
        tape.branch = b
        tape.squeeze = squeeze
    last = len(b.layers) - 1
    for idx, layer in enumerate(b.layers):
        mask = None
        if use_dropout:
            mask = dropout_mask(x.shape, b.dropout_rate, rng, x.dtype.type)
            x = x * mask
        z = x @ layer.weight + layer.bias
        active = None
        if idx != last:
            active = z > 0
            out = np.maximum(z, 0.0)
        else:
            out = z
        if tape is not None:
            tape.records.append(_LayerRecord(x, mask, active))
        x = out
    return x[0] if squeeze else x


def branch_backward(b: Branch, tape: Tape, grad_out) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients ``[(d_weight, d_bias), ...]`` per layer and the gradient w.r.t. the input."""
    if tape is None or tape.branch is not b or tape.consumed or len(tape.records) != len(b.layers):
        raise RuntimeError("stale or missing tape: run a train-mode branch_forward with this tape first")
    g, _ = _as_batch(grad_out)
    grads = [None] * len(b.layers)
    for idx in range(len(b.layers) - 1, -1, -1):
        rec = tape.records[idx]
        layer = b.layers[idx]
        if rec.active is not None:
            g = g * rec.active
        grads[idx] = (rec.x.T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
        if rec.mask is not None:
            g = g * rec.mask
    tape.consumed = True
    return grads, (g[0] if tape.squeeze else g)


def cosine(u, v) -> np.ndarray | float:
    """Row-wise cosine; norms are floored at ``EPS_NORM`` so a zero vector scores 0."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    nu = np.maximum(np.linalg.norm(u, axis=-1), EPS_NORM)
    nv = np.maximum(np.linalg.norm(v, axis=-1), EPS_NORM)
    out = np.sum(u * v, axis=-1) / (nu * nv)
    return float(out) if out.ndim == 0 else out


def cosine_backward(u, v, grad_out) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u)
    v = np.asarray(v)
    g = np.asarray(grad_out, dtype=u.dtype)[..., None]
    ru = np.linalg.norm(u, axis=-1)[..., None]
    rv = np.linalg.norm(v, axis=-1)[..., None]
    nu = np.maximum(ru, EPS_NORM)
    nv = np.maximum(rv, EPS_NORM)
    dot = np.sum(u * v, axis=-1)[..., None]
    # a clamped norm is a constant, so its radial term vanishes
    gu = v / (nu * nv) - np.where(ru > EPS_NORM, dot * u / (nu**3 * nv), 0.0)
    gv = u / (nu * nv) - np.where(rv > EPS_NORM, dot * v / (nv**3 * nu), 0.0)
    return g * gu, g * gv


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, l2_weight: float = 0.0) -> None:
    """One Adam update in place, with L2 added to the gradient.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    for name, p in params.items():
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        kernels.adam_update(p, grads[name], state.first_moment[name], state.second_moment[name],
                            lr, l2_weight, state.beta1, state.beta2, state.epsilon, state.step_count)
