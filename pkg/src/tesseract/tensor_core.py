"""Dense and CP-factored tensors.

Dense tensors are plain ``float64`` numpy arrays (C order, so the flat
buffer is row-major).  CP tensors keep a weight vector and one factor
matrix per mode, column ``r`` of mode ``j`` being the mode-``j`` vector of
the ``r``-th rank-one term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NORM_TOL = 1e-9


class ShapeError(ValueError):
    """Raised when tensor modes do not line up."""


def as_dense(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate and return a float64 dense tensor.

    ``data`` may be an array of any shape or a flat sequence together with
    ``shape`` (row-major order).
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        dims = tuple(int(d) for d in shape)
        if any(d < 1 for d in dims) or not dims:
            raise ValueError(f"invalid shape {dims}")
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"{arr.size} entries do not fill shape {dims}")
        arr = arr.reshape(dims)
    if arr.ndim == 0:
        raise ValueError("a tensor needs at least one mode")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class CpTensor:
    """Weighted sum of rank-one outer products.

    Parameters
    ----------
    weights : (k,) array
    factors : list of (dim_j, k) arrays, one per mode
    normalized : bool
        If True every factor column must have unit Euclidean norm.
    meta : dict
        Free-form diagnostics attached by the producer (e.g. ALS residual).
    """

    weights: np.ndarray
    factors: tuple
    normalized: bool = True
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        facs = tuple(np.array(f, dtype=np.float64) for f in self.factors)
        k = w.size
        if k < 1:
            raise ValueError("rank must be at least 1")
        if not facs:
            raise ValueError("order must be at least 1")
        for j, f in enumerate(facs):
            if f.ndim != 2 or f.shape[1] != k or f.shape[0] < 1:
                raise ShapeError(f"factor {j} has shape {f.shape}, expected (dim, {k})")
        if not np.all(np.isfinite(w)) or not all(np.all(np.isfinite(f)) for f in facs):
            raise ValueError("weights and factors must be finite")
        if self.normalized:
            for j, f in enumerate(facs):
                norms = np.linalg.norm(f, axis=0)
                if np.any(np.abs(norms - 1.0) > NORM_TOL):
                    raise ValueError(f"factor {j} columns are not unit norm: {norms}")
        w.setflags(write=False)
        for f in facs:
            f.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "factors", facs)

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    def normalize(self) -> "CpTensor":
        """Return the equivalent tensor with unit factor columns.

        Column norms are absorbed into the weights.  Zero columns are
        replaced by the first basis vector with the weight set to zero.
        """
        w = self.weights.copy()
        facs = []
        for f in self.factors:
            f = f.copy()
            norms = np.linalg.norm(f, axis=0)
            zero = norms == 0
            norms[zero] = 1.0
            f /= norms
            f[:, zero] = 0.0
            f[0, zero] = 1.0
            w = w * norms
            w[zero] = 0.0
            facs.append(f)
        return CpTensor(w, facs, normalized=True, meta=dict(self.meta))


def outer_product(vectors: Sequence) -> np.ndarray:
    """Outer product of ``n`` vectors as an order-``n`` dense tensor."""
    if len(vectors) == 0:
        raise ValueError("need at least one vector")
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    if any(v.size == 0 for v in vecs):
        raise ValueError("vectors must be nonempty")
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return np.array(out, dtype=np.float64)


def contract(a, b, shared: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over paired modes of ``a`` and ``b``.

    The result's modes are the free modes of ``a`` (in order) followed by
    the free modes of ``b``.  A full contraction returns a 0-d array.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axes_a = [int(p[0]) for p in shared]
    axes_b = [int(p[1]) for p in shared]
    for ia, ib in zip(axes_a, axes_b):
        if not (0 <= ia < a.ndim and 0 <= ib < b.ndim):
            raise ShapeError(f"mode pair ({ia}, {ib}) out of range")
        if a.shape[ia] != b.shape[ib]:
            raise ShapeError(
                f"mode {ia} of a has dim {a.shape[ia]} but mode {ib} of b has dim {b.shape[ib]}"
            )
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def cp_reconstruct(t: CpTensor) -> np.ndarray:
    out = np.zeros(t.shape)
    for r in range(t.rank):
        if t.weights[r] != 0.0:
            out += t.weights[r] * outer_product([f[:, r] for f in t.factors])
    return out


def cp_inner_product(t: CpTensor, action_vectors: Sequence) -> float:
    """<t, a_1 x ... x a_n> in O(n k m) without forming either tensor."""
    if len(action_vectors) != t.order:
        raise ShapeError(f"expected {t.order} vectors, got {len(action_vectors)}")
    prod = t.weights.copy()
    for j, (f, v) in enumerate(zip(t.factors, action_vectors)):
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != f.shape[0]:
            raise ShapeError(f"mode {j}: vector length {v.size} != dim {f.shape[0]}")
        prod = prod * (v @ f)
    return float(prod.sum())


def frobenius_norm(t) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(t, dtype=np.float64)))))


def random_cp(shape: Sequence[int], rank: int, rng: np.random.Generator,
              positive_weights: bool = True) -> CpTensor:
    """Gaussian factors, normalized columns; weights in [1, 2) by default."""
    facs = [rng.standard_normal((d, rank)) for d in shape]
    w = rng.uniform(1.0, 2.0, rank) if positive_weights else rng.standard_normal(rank)
    return CpTensor(w, facs, normalized=False).normalize()
