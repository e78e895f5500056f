"""CP decomposition by alternating least squares, dense and masked.

The masked variant fits only the observed entries (weighted by how often
each was observed) and is what turns empirical reward/transition moments
into low-rank estimates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import networkx as nx
import numpy as np

from .tensor_core import CpTensor, ShapeError, cp_reconstruct, frobenius_norm

RIDGE = 1e-9
# stop a restart when the relative residual improves by less than this per sweep
STALL = 1e-13


@dataclass(frozen=True)
class AlsConfig:
    rank: int = 1
    max_sweeps: int = 500
    restarts: int = 3
    tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1 or self.max_sweeps < 1 or self.restarts < 1:
            raise ValueError(f"invalid ALS config {self}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def with_rank(self, rank: int) -> "AlsConfig":
        return AlsConfig(rank, self.max_sweeps, self.restarts, self.tol, self.seed)


@dataclass(frozen=True, eq=False)
class ObservedEntries:
    """Observed tensor entries: multi-indices, (mean) values and visit counts."""

    indices: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, len(shape))
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        cnt = np.asarray(self.counts, dtype=np.float64).reshape(-1)
        if not (len(idx) == len(vals) == len(cnt)):
            raise ShapeError("indices, values and counts differ in length")
        if np.any(idx < 0) or np.any(idx >= np.array(shape)):
            raise ShapeError("observed index outside the tensor shape")
        if np.any(cnt < 1):
            raise ValueError("counts must be >= 1")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observed values must be finite")
        flat = np.ravel_multi_index(idx.T, shape) if len(idx) else np.zeros(0, int)
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate observed indices")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "counts", cnt)

    @classmethod
    def from_dense(cls, t, mask=None, counts=None) -> "ObservedEntries":
        t = np.asarray(t, dtype=np.float64)
        mask = np.ones(t.shape, bool) if mask is None else np.asarray(mask, bool)
        idx = np.argwhere(mask)
        cnt = np.ones(len(idx)) if counts is None else np.asarray(counts)[mask]
        return cls(idx, t[mask], cnt, t.shape)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class CoherenceStats:
    mu: float
    w_max: float
    w_min: float


def _restart_streams(cfg: AlsConfig):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)]


def _init_factors(shape, k, rng):
    facs = []
    for d in shape:
        f = rng.uniform(-1.0, 1.0, (d, k))
        facs.append(f / np.maximum(np.linalg.norm(f, axis=0), 1e-300))
    return facs


def _normalize_cols(f):
    norms = np.linalg.norm(f, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return f / safe, norms


def _khatri_rao(mats, k):
    out = np.ones((1, k))
    for m in mats:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, k)
    return out


def _finish(weights, facs, residual, sweeps) -> CpTensor:
    w = np.array(weights, dtype=np.float64)
    facs = [f.copy() for f in facs]
    # signs: make weights nonnegative by flipping the mode-0 column
    neg = w < 0
    w[neg] *= -1
    facs[0][:, neg] *= -1
    order = np.argsort(-w, kind="stable")
    t = CpTensor(w[order], [f[:, order] for f in facs], normalized=False).normalize()
    t.meta.update(residual=float(residual), sweeps=int(sweeps))
    return t


def _fit_residual(t, facs, scale):
    k = facs[0].shape[1]
    return frobenius_norm(t - cp_reconstruct(CpTensor(np.ones(k), facs, normalized=False))) / scale


def _dense_run(t, k, cfg, rng):
    """ALS sweeps with extrapolation line search against swamps.

    After each sweep the factors are pushed along the last sweep's
    direction by ``sweep ** (1/3)`` and the step is kept only if it
    lowers the residual.
    """
    n = t.ndim
    facs = _init_factors(t.shape, k, rng)
    unfolded = [np.moveaxis(t, j, 0).reshape(t.shape[j], -1) for j in range(n)]
    scale = max(frobenius_norm(t), 1e-12)
    prev = np.inf
    res = np.inf
    sweep = 0
    old = None
    for sweep in range(1, cfg.max_sweeps + 1):
        for j in range(n):
            others = [facs[m] for m in range(n) if m != j]
            gram = np.ones((k, k))
            for f in others:
                gram *= f.T @ f
            rhs = unfolded[j] @ _khatri_rao(others, k)
            new = np.linalg.solve(gram + RIDGE * np.eye(k), rhs.T).T
            # keep the scale in the last mode so the factors describe the fit
            facs[j] = new if j == n - 1 else _normalize_cols(new)[0]
        res = _fit_residual(t, facs, scale)
        if old is not None and sweep > 2:
            step = sweep ** (1.0 / 3.0)
            trial = [f + step * (f - g) for f, g in zip(facs, old)]
            trial_res = _fit_residual(t, trial, scale)
            if trial_res < res:
                facs, res = trial, trial_res
        old = [f.copy() for f in facs]
        if res <= cfg.tol or prev - res < STALL:
            break
        prev = res
    weights = np.ones(k)
    for j in range(n):
        facs[j], norms = _normalize_cols(facs[j])
        weights = weights * norms
    return weights, facs, res, sweep


def als_decompose(t, cfg: AlsConfig) -> tuple[CpTensor, float]:
    """Best-of-restarts rank-``cfg.rank`` CP fit of a dense tensor.

    Returns the normalized CP tensor and the relative residual
    ``||t - fit||_F / max(||t||_F, 1e-12)``.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0 or not np.all(np.isfinite(t)):
        raise ValueError("tensor must be finite with at least one mode")
    best = None
    for i, rng in enumerate(_restart_streams(cfg)):
        w, facs, res, sweeps = _dense_run(t, cfg.rank, cfg, rng)
        if best is None or res < best[2]:
            best = (w, facs, res, sweeps, i)
        if res <= cfg.tol:
            break
    w, facs, res, sweeps, i = best
    out = _finish(w, facs, res, sweeps)
    out.meta["restart"] = i
    return out, float(res)


def _masked_run(obs: ObservedEntries, k, cfg, rng):
    shape = obs.shape
    n = len(shape)
    idx, y, c = obs.indices, obs.values, obs.counts
    facs = _init_factors(shape, k, rng)
    scale = max(np.sqrt(np.sum(c * y * y)), 1e-12)
    weights = np.ones(k)
    prev = np.inf
    res = np.inf
    sweep = 0
    eye = RIDGE * np.eye(k)
    for sweep in range(1, cfg.max_sweeps + 1):
        for j in range(n):
            z = np.ones((len(y), k))
            for m in range(n):
                if m != j:
                    z *= facs[m][idx[:, m]]
            d = shape[j]
            rows = idx[:, j]
            gram = np.empty((d, k, k))
            for a in range(k):
                for b in range(a, k):
                    g = np.bincount(rows, weights=c * z[:, a] * z[:, b], minlength=d)
                    gram[:, a, b] = g
                    gram[:, b, a] = g
            rhs = np.stack(
                [np.bincount(rows, weights=c * y * z[:, a], minlength=d) for a in range(k)], axis=1
            )
            new = np.linalg.solve(gram + eye, rhs[:, :, None])[:, :, 0]
            facs[j], weights = _normalize_cols(new)
        pred = np.ones((len(y), k))
        for m in range(n):
            pred *= facs[m][idx[:, m]]
        err = y - pred @ weights
        res = np.sqrt(np.sum(c * err * err)) / scale
        if res <= cfg.tol or prev - res < STALL:
            break
        prev = res
    return weights, facs, res, sweep


def _unobserved(obs: ObservedEntries):
    missing = []
    for j, d in enumerate(obs.shape):
        seen = np.bincount(obs.indices[:, j], minlength=d) if len(obs) else np.zeros(d)
        missing.extend((j, int(i)) for i in np.flatnonzero(seen == 0))
    return missing


def complete_from_samples(obs: ObservedEntries, shape, cfg: AlsConfig) -> CpTensor:
    """Rank-``cfg.rank`` CP fit to observed entries only, count-weighted.

    Mode indices that never appear among the observations cannot be
    identified; they are listed in ``result.meta["unobserved"]`` and their
    factor rows come out as zero.
    """
    shape = tuple(int(d) for d in shape)
    if tuple(obs.shape) != shape:
        raise ShapeError(f"observations are over {obs.shape}, not {shape}")
    full = len(obs) == int(np.prod(shape)) and np.all(obs.counts == obs.counts[0])
    if full:
        # equal weights on every entry: same objective as the dense fit
        dense = np.zeros(shape)
        dense[tuple(obs.indices.T)] = obs.values
        out, _ = als_decompose(dense, cfg)
        out.meta["unobserved"] = []
        return out
    if len(obs) == 0:
        out = _finish(np.zeros(cfg.rank), [np.ones((d, cfg.rank)) for d in shape], 0.0, 0)
        out.meta["unobserved"] = _unobserved(obs)
        return out
    best = None
    for i, rng in enumerate(_restart_streams(cfg)):
        w, facs, res, sweeps = _masked_run(obs, cfg.rank, cfg, rng)
        if best is None or res < best[2]:
            best = (w, facs, res, sweeps, i)
        if res <= cfg.tol:
            break
    w, facs, res, sweeps, i = best
    out = _finish(w, facs, res, sweeps)
    out.meta.update(restart=i, unobserved=_unobserved(obs))
    return out


def boosted_estimate(estimates: Sequence, eps: float) -> np.ndarray:
    """Pick a member of the largest cluster of mutually close estimates.

    Two estimates are close when their Frobenius distance is at most
    ``2 eps / 3``.  Among equally large clusters the one containing the
    lowest index wins, and its lowest-index member is returned.
    """
    if len(estimates) == 0:
        raise ValueError("need at least one estimate")
    if not eps > 0:
        raise ValueError("eps must be positive")
    ests = [np.asarray(e, dtype=np.float64) for e in estimates]
    if any(e.shape != ests[0].shape for e in ests):
        raise ShapeError("estimates differ in shape")
    g = nx.Graph()
    g.add_nodes_from(range(len(ests)))
    for i, j in itertools.combinations(range(len(ests)), 2):
        if frobenius_norm(ests[i] - ests[j]) <= 2.0 * eps / 3.0:
            g.add_edge(i, j)
    cliques = [sorted(c) for c in nx.find_cliques(g)]
    size = max(len(c) for c in cliques)
    best = min(c for c in cliques if len(c) == size)
    return ests[best[0]]


def approx_rank(t, tol: float, max_rank: int, cfg: AlsConfig) -> int:
    """Smallest rank whose ALS fit reaches relative residual ``tol``.

    Returns ``max_rank + 1`` when no rank up to ``max_rank`` does.  ALS is
    a heuristic, so this is an upper bound on the CP rank, not the rank.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    for k in range(1, max_rank + 1):
        _, res = als_decompose(t, cfg.with_rank(k))
        if res <= tol:
            return k
    return max_rank + 1


def coherence(t: CpTensor) -> CoherenceStats:
    if not t.normalized:
        raise ValueError("coherence is defined for normalized CP tensors")
    if np.any(t.weights <= 0):
        raise ValueError("coherence needs positive weights")
    mu = np.sqrt(t.order) * max(np.max(np.abs(f)) for f in t.factors)
    return CoherenceStats(float(mu), float(t.weights.max()), float(t.weights.min()))
