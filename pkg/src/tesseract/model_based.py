"""Model-based learning: estimate low-rank dynamics from rollouts, then
evaluate and improve the policy on the estimated model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bellman import (improve_policy, mean_return, policy_evaluate_exact,
                      policy_evaluate_iterative)
from .cp_decomp import AlsConfig, ObservedEntries, complete_from_samples
from .mmdp import FactoredPolicy, Mmdp, Trajectory, min_policy_mass, rollout
from .tensor_core import cp_reconstruct, frobenius_norm

METRIC_FIELDS = ("schema_version", "iteration", "true_return", "reward_err",
                 "transition_err", "min_policy_mass", "wall_ms")
SCHEMA_VERSION = 1


class BoundUndefinedError(ValueError):
    """eps * |S| >= 1: the normalizer interval is unbounded."""


@dataclass
class DynamicsEstimate:
    reward_hat: np.ndarray
    transition_hat: np.ndarray
    transition_raw: np.ndarray
    visit_counts: np.ndarray
    f: np.ndarray
    f_bounds: tuple | None
    unidentified: list

    def to_mmdp(self, gamma: float) -> Mmdp:
        S = self.reward_hat.shape[0]
        n = self.reward_hat.ndim - 1
        U = self.reward_hat.shape[1] if n else 1
        return Mmdp(S, n, U, gamma, self.reward_hat, self.transition_hat,
                    meta={"estimated": True, "unidentified": list(self.unidentified)})


@dataclass
class MbConfig:
    rank: int = 2
    episodes_per_iter: int = 10
    rollout_len: int = 50
    inner_iters: int = 200
    inner_tol: float = 1e-6
    improvement: str = "greedy"
    eps_start: float = 1.0
    eps_decay: float = 0.7
    eps_min: float = 0.05
    temperature: float = 1.0
    outer_iters: int = 20
    seed: int = 0
    als: AlsConfig = field(default_factory=lambda: AlsConfig(max_sweeps=300, restarts=2, tol=1e-9))
    oracle_dynamics: bool = False

    def __post_init__(self):
        if isinstance(self.als, dict):
            self.als = AlsConfig(**self.als)
        for name in ("rank", "episodes_per_iter", "rollout_len", "inner_iters", "outer_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("eps_start", "eps_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.eps_decay <= 1.0:
            raise ValueError("eps_decay must lie in [0, 1]")

    def eps_at(self, iteration: int) -> float:
        return max(self.eps_min, self.eps_start * self.eps_decay ** iteration)


def f_interval(eps: float, num_states: int) -> tuple[float, float]:
    if eps * num_states >= 1.0:
        raise BoundUndefinedError(f"eps * |S| = {eps * num_states} >= 1")
    return 1.0 / (1.0 + eps * num_states), 1.0 / (1.0 - eps * num_states)


def _moments(data, S, action_shape):
    J = int(np.prod(action_shape))
    s = np.concatenate([tr.states[:-1] for tr in data])
    s2 = np.concatenate([tr.states[1:] for tr in data])
    j = np.concatenate([np.ravel_multi_index(tr.actions.T, action_shape) for tr in data])
    r = np.concatenate([tr.rewards for tr in data])
    counts = np.bincount(s * J + j, minlength=S * J).reshape(S, J)
    rsum = np.bincount(s * J + j, weights=r, minlength=S * J).reshape(S, J)
    nxt = np.bincount((s * J + j) * S + s2, minlength=S * J * S).reshape(S, J, S)
    return counts, rsum, nxt


def estimate_dynamics(data: list[Trajectory], num_states: int, num_agents: int,
                      num_actions: int, rank: int, cfg: AlsConfig,
                      eps: float | None = None) -> DynamicsEstimate:
    """Rank-``rank`` completion of the empirical reward means and
    conditional next-state frequencies.

    Completed next-state vectors are clipped to [0, 1] and renormalized;
    the normalizer per (s, u) is kept in ``f``.  States never visited get
    zero reward and uniform transitions and are flagged ``unidentified``.
    """
    if not data:
        raise ValueError("no trajectories")
    S = num_states
    shape = (num_actions,) * num_agents
    counts, rsum, nxt = _moments(data, S, shape)
    acfg = cfg.with_rank(rank)
    reward = np.zeros((S,) + shape)
    raw = np.full((S, S) + shape, 1.0 / S)
    unidentified = []
    for s in range(S):
        seen = np.flatnonzero(counts[s])
        if seen.size == 0:
            unidentified.append(True)
            continue
        unidentified.append(False)
        idx = np.array(np.unravel_index(seen, shape)).T
        c = counts[s, seen]
        obs = ObservedEntries(idx, rsum[s, seen] / c, c, shape)
        reward[s] = cp_reconstruct(complete_from_samples(obs, shape, acfg))
        for s2 in range(S):
            obs = ObservedEntries(idx, nxt[s, seen, s2] / c, c, shape)
            raw[s, s2] = cp_reconstruct(complete_from_samples(obs, shape, acfg))
    raw = np.clip(raw, 0.0, 1.0)
    total = raw.sum(axis=1)
    degenerate = total <= 0
    f = np.where(degenerate, np.nan, 1.0 / np.where(degenerate, 1.0, total))
    trans = np.where(degenerate[:, None], 1.0 / S, raw * np.nan_to_num(f)[:, None])
    bounds = f_interval(eps, S) if eps is not None else None
    return DynamicsEstimate(reward, trans, raw, counts.reshape((S,) + shape), f, bounds,
                            unidentified)


def dynamics_errors(m: Mmdp, est: DynamicsEstimate, raw: bool = False):
    """Per-state reward and per-(s, s') transition Frobenius errors."""
    p = est.transition_raw if raw else est.transition_hat
    r_err = np.array([frobenius_norm(est.reward_hat[s] - m.reward[s])
                      for s in range(m.num_states)])
    p_err = np.array([[frobenius_norm(p[s, s2] - m.transition[s, s2])
                       for s2 in range(m.num_states)] for s in range(m.num_states)])
    return r_err, p_err


def run_model_based(m: Mmdp, cfg: MbConfig):
    """Collect rollouts, fit the model, evaluate on it, improve; repeat.

    Returns ``(policy, q_hat, metrics)`` where ``metrics`` has one dict
    per outer iteration with the fields of ``METRIC_FIELDS``.  With
    ``cfg.oracle_dynamics`` the true model replaces the estimate.
    """
    rng = np.random.default_rng(cfg.seed)
    pi = FactoredPolicy.uniform(m.num_states, m.num_agents, m.num_actions)
    q = np.zeros((m.num_states,) + m.action_shape)
    data: list[Trajectory] = []
    metrics = []
    for it in range(cfg.outer_iters):
        t0 = time.perf_counter()
        for _ in range(cfg.episodes_per_iter):
            data.append(rollout(m, pi, cfg.rollout_len, rng))
        if cfg.oracle_dynamics:
            model, r_err, p_err = m, 0.0, 0.0
        else:
            est = estimate_dynamics(data, m.num_states, m.num_agents, m.num_actions,
                                    cfg.rank, cfg.als)
            model = est.to_mmdp(m.gamma)
            re, pe = dynamics_errors(m, est)
            r_err, p_err = float(re.max()), float(pe.max())
        q, _ = policy_evaluate_iterative(model, pi, cfg.inner_iters, cfg.inner_tol, q0=q)
        pi = improve_policy(q, cfg.improvement, eps=cfg.eps_at(it),
                            temperature=cfg.temperature)
        metrics.append({
            "schema_version": SCHEMA_VERSION,
            "iteration": it,
            "true_return": mean_return(m, pi),
            "reward_err": r_err,
            "transition_err": p_err,
            "min_policy_mass": min_policy_mass(pi),
            "wall_ms": 1000.0 * (time.perf_counter() - t0),
        })
    return pi, q, metrics


def thm2_delta(mu, k, w_max, w_min, num_actions, num_agents, r_frob, eps, c1) -> float:
    """Lower bound on per-joint-action behaviour probability for one state.

    ``c1`` is the unspecified problem constant and must be supplied; the
    value is a diagnostic, not a computable guarantee.
    """
    args = (mu, k, w_max, w_min, num_actions, num_agents, r_frob, eps, c1)
    if any(not a > 0 for a in args):
        raise ValueError("all inputs must be positive")
    num = c1 * mu ** 6 * k ** 5 * w_max ** 4 * np.log(num_actions) ** 4 \
        * np.log(3 * k * r_frob / eps)
    return float(num / (num_actions ** (num_agents / 2) * w_min ** 4))


def thm3_bound(eps: float, gamma: float, num_states: int) -> tuple[float, float]:
    """Evaluation-error bound at both ends of the normalizer interval.

    Returns ``(lo, hi)``, the smaller and larger endpoint value.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    vals = []
    for f in f_interval(eps, num_states):
        vals.append((abs(1 - f) + f * num_states * eps) * gamma / (2 * (1 - gamma) ** 2)
                    + eps / (1 - gamma))
    return min(vals), max(vals)


@dataclass
class Thm3Report:
    reward_eps: np.ndarray
    transition_eps: np.ndarray
    achieved_eps: float
    empirical_error: float
    bound: tuple | None

    @property
    def holds(self) -> bool:
        return self.bound is not None and self.empirical_error <= self.bound[1] + 1e-8


def verify_thm3(m: Mmdp, pi_b: FactoredPolicy, pi_eval: FactoredPolicy, cfg: MbConfig,
                estimate: DynamicsEstimate | None = None) -> Thm3Report:
    """Estimate dynamics under ``pi_b``, evaluate ``pi_eval`` on the true and
    estimated models, and compare the gap with the error bound.

    The achieved eps is the largest Frobenius error over all reward
    tensors and all clipped (pre-normalization) transition tensors.
    """
    if min_policy_mass(pi_b) <= 0:
        raise ValueError("behaviour policy must give every joint action positive mass")
    if estimate is None:
        rng = np.random.default_rng(cfg.seed)
        data = [rollout(m, pi_b, cfg.rollout_len, rng) for _ in range(cfg.episodes_per_iter)]
        estimate = estimate_dynamics(data, m.num_states, m.num_agents, m.num_actions,
                                     cfg.rank, cfg.als)
    r_err, p_err = dynamics_errors(m, estimate, raw=True)
    eps = float(max(r_err.max(), p_err.max()))
    q_true = policy_evaluate_exact(m, pi_eval)
    q_est = policy_evaluate_exact(estimate.to_mmdp(m.gamma), pi_eval)
    gap = float(np.max(np.abs(q_true - q_est)))
    try:
        bound = thm3_bound(eps, m.gamma, m.num_states)
    except BoundUndefinedError:
        bound = None
    return Thm3Report(r_err, p_err, eps, gap, bound)


def exact_estimate(m: Mmdp) -> DynamicsEstimate:
    """A DynamicsEstimate carrying the true dynamics (zero error)."""
    S = m.num_states
    return DynamicsEstimate(np.array(m.reward), np.array(m.transition), np.array(m.transition),
                            np.zeros((S,) + m.action_shape, dtype=int),
                            np.ones((S,) + m.action_shape), (1.0, 1.0), [False] * S)
