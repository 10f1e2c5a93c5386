"""CoBraR (one shared branch) and DeepMF (separate user/item branches).

Both models down-project a sparse interaction profile with a linear layer
(``f_u`` for user rows, ``f_t`` for item columns) whose width ``p`` is the
first layer size, then encode it with a branch and score with cosine.
CoBraR's ``user_branch`` and ``item_branch`` are the same object, so
gradients from both paths land in one set of arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cobrar import kernels
from cobrar.dataset import InteractionDataset
from cobrar.nncore import Branch, LinearLayer, Tape, branch_forward, cosine

KINDS = ("cobrar", "deepmf")


@dataclass(frozen=True)
class ParamCount:
    branch_params: int
    downproj_params: int
    total: int


def param_count(architecture, kind: str, n_users: int, n_items: int, p: int | None = None) -> ParamCount:
    """Weight counts with biases neglected.

    ``branch_params`` is ``sum(d_i * d_{i+1})`` for CoBraR and twice that for
    DeepMF; the down-projections add ``(M + N) * p`` for either kind.
    """
    sizes = [int(d) for d in architecture]
    if not sizes:
        raise ValueError("architecture needs at least one layer size")
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    p = sizes[0] if p is None else int(p)
    single = sum(a * b for a, b in zip(sizes, sizes[1:]))
    branch = 2 * single if kind == "deepmf" else single
    downproj = (n_items + n_users) * p
    return ParamCount(branch, downproj, branch + downproj)


class EmbedCache:
    """What a train-mode embedding pass needs for its backward pass."""

    def __init__(self, side: str, index: np.ndarray, tape: Tape):
        self.side = side
        self.index = index
        self.tape = tape


class ProfileModel:
    """Shared machinery: down-projections, embedding, parameters, scoring."""

    kind = ""

    def __init__(self, f_u: LinearLayer, f_t: LinearLayer, mu: float = 1e-6):
        self.f_u = f_u
        self.f_t = f_t
        self.mu = float(mu)

    # subclasses supply the two branches
    user_branch: Branch
    item_branch: Branch

    @property
    def n_users(self) -> int:
        return self.f_t.d_in

    @property
    def n_items(self) -> int:
        return self.f_u.d_in

    @property
    def layer_sizes(self) -> list[int]:
        return self.user_branch.sizes

    @property
    def dropout_rate(self) -> float:
        return self.user_branch.dropout_rate

    @property
    def dtype(self):
        return self.f_u.weight.dtype

    def branches(self) -> dict[str, Branch]:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array, in a fixed order. Arrays are live, not copies."""
        out = {"f_u.weight": self.f_u.weight, "f_u.bias": self.f_u.bias,
               "f_t.weight": self.f_t.weight, "f_t.bias": self.f_t.bias}
        for name, branch in self.branches().items():
            for idx, layer in enumerate(branch.layers):
                out[f"{name}.{idx}.weight"] = layer.weight
                out[f"{name}.{idx}.bias"] = layer.bias
        return out

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the live arrays (keeps weight sharing intact)."""
        params = self.parameters()
        if set(values) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(values) ^ set(params))}")
        for name, arr in params.items():
            if values[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {values[name].shape} vs {arr.shape}")
            arr[...] = values[name]

    def param_count(self) -> ParamCount:
        return param_count(self.layer_sizes, self.kind, self.n_users, self.n_items)

    def _embed(self, side, ds: InteractionDataset, index, train, rng, tape):
        index = np.atleast_1d(np.asarray(index, dtype=np.int64))
        if side == "user":
            proj, branch, indptr, indices, n = self.f_u, self.user_branch, ds.row_indptr, ds.row_indices, ds.n_users
        else:
            proj, branch, indptr, indices, n = self.f_t, self.item_branch, ds.col_indptr, ds.col_indices, ds.n_items
        if (ds.n_users, ds.n_items) != (self.n_users, self.n_items):
            raise ValueError(f"dataset shape {(ds.n_users, ds.n_items)} does not match model "
                             f"{(self.n_users, self.n_items)}")
        if len(index) and (index.min() < 0 or index.max() >= n):
            raise IndexError(f"{side} index out of range [0, {n})")
        x = kernels.csr_rows_matmul(indptr, indices, index, proj.weight) + proj.bias
        return branch_forward(branch, x, train=train, rng=rng, tape=tape)

    def embed_users(self, ds, users, train=False, rng=None) -> tuple[np.ndarray, EmbedCache | None]:
        tape = Tape() if train else None
        out = self._embed("user", ds, users, train, rng, tape)
        return out, (EmbedCache("user", np.asarray(users, dtype=np.int64), tape) if train else None)

    def embed_items(self, ds, items, train=False, rng=None) -> tuple[np.ndarray, EmbedCache | None]:
        tape = Tape() if train else None
        out = self._embed("item", ds, items, train, rng, tape)
        return out, (EmbedCache("item", np.asarray(items, dtype=np.int64), tape) if train else None)

    def score_users(self, ds: InteractionDataset, users, item_emb: np.ndarray | None = None) -> np.ndarray:
        """Eval-mode cosine scores of ``users`` against every item, shape (len(users), M)."""
        if item_emb is None:
            item_emb = self.item_embeddings(ds)
        user_emb, _ = self.embed_users(ds, users)
        return _normalize(user_emb) @ _normalize(item_emb).T

    def item_embeddings(self, ds: InteractionDataset) -> np.ndarray:
        return self.embed_items(ds, np.arange(self.n_items))[0]


def _normalize(e):
    return e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)


class CoBraRModel(ProfileModel):
    kind = "cobrar"

    def __init__(self, f_u: LinearLayer, f_t: LinearLayer, g: Branch, mu: float = 1e-6):
        super().__init__(f_u, f_t, mu)
        if f_u.d_out != g.in_dim or f_t.d_out != g.in_dim:
            raise ValueError("down-projection width must equal the branch input size")
        self.g = g

    @property
    def user_branch(self) -> Branch:
        return self.g

    @property
    def item_branch(self) -> Branch:
        return self.g

    def branches(self):
        return {"g": self.g}


class DeepMFModel(ProfileModel):
    kind = "deepmf"

    def __init__(self, f_u: LinearLayer, f_t: LinearLayer, g_u: Branch, g_v: Branch, mu: float = 1e-6):
        super().__init__(f_u, f_t, mu)
        if g_u.sizes != g_v.sizes:
            raise ValueError("user and item branches must share one architecture")
        if f_u.d_out != g_u.in_dim or f_t.d_out != g_v.in_dim:
            raise ValueError("down-projection width must equal the branch input size")
        self.g_u = g_u
        self.g_v = g_v

    @property
    def user_branch(self) -> Branch:
        return self.g_u

    @property
    def item_branch(self) -> Branch:
        return self.g_v

    def branches(self):
        return {"g_u": self.g_u, "g_v": self.g_v}


def build_model(kind: str, n_users: int, n_items: int, layer_sizes, dropout_rate: float = 0.0,
                mu: float = 1e-6, rng: np.random.Generator | int | None = 0,
                dtype=np.float64) -> ProfileModel:
    """Glorot-initialised model; ``p`` is ``layer_sizes[0]``."""
    rng = np.random.default_rng(rng)
    sizes = [int(s) for s in layer_sizes]
    p = sizes[0]
    f_u = LinearLayer.glorot(n_items, p, rng, dtype)
    f_t = LinearLayer.glorot(n_users, p, rng, dtype)
    if kind == "cobrar":
        return CoBraRModel(f_u, f_t, Branch.build(sizes, dropout_rate, rng, dtype), mu)
    if kind == "deepmf":
        g_u = Branch.build(sizes, dropout_rate, rng, dtype)
        g_v = Branch.build(sizes, dropout_rate, rng, dtype)
        return DeepMFModel(f_u, f_t, g_u, g_v, mu)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def user_embed(m: ProfileModel, ds: InteractionDataset, i: int, train: bool = False,
               rng=None) -> np.ndarray:
    """``e_i`` for one user; ``ds`` must be the train interactions."""
    if not 0 <= i < ds.n_users:
        raise IndexError(f"user index {i} out of range [0, {ds.n_users})")
    return m.embed_users(ds, [i], train, rng)[0][0]


def item_embed(m: ProfileModel, ds: InteractionDataset, j: int, train: bool = False,
               rng=None) -> np.ndarray:
    if not 0 <= j < ds.n_items:
        raise IndexError(f"item index {j} out of range [0, {ds.n_items})")
    return m.embed_items(ds, [j], train, rng)[0][0]


def score(m: ProfileModel | None, e_i, e_j) -> float:
    """Raw cosine of two embeddings; no clamping here."""
    return cosine(e_i, e_j)
