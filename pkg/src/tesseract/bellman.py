"""Tensorised Bellman expectation operator and policy evaluation/improvement.

A Q-function is kept in curried form: ``q[s]`` is the order-``n`` action
tensor of state ``s``.  It is passed around either as one dense array of
shape ``(S,) + (U,) * n`` or as a list of per-state ``CpTensor``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cp_decomp import AlsConfig, als_decompose
from .mmdp import FactoredPolicy, Mmdp
from .tensor_core import CpTensor, contract, cp_inner_product, cp_reconstruct


def _policy_vectors(pi: FactoredPolicy, s: int):
    return [pi.probs[s, i] for i in range(pi.probs.shape[1])]


def expected_under_policy(q_s, pi: FactoredPolicy, s: int) -> float:
    """<U^pi(s), Q(s)>: the expectation of one state's action tensor."""
    vecs = _policy_vectors(pi, s)
    if isinstance(q_s, CpTensor):
        return cp_inner_product(q_s, vecs)
    out = np.asarray(q_s, dtype=np.float64)
    # contract the rank-one policy tensor one mode at a time
    for v in vecs:
        out = contract(out, v, [(0, 0)])
    return float(out)


def state_values(m: Mmdp, pi: FactoredPolicy, q) -> np.ndarray:
    return np.array([expected_under_policy(q[s], pi, s) for s in range(m.num_states)])


def densify(q) -> np.ndarray:
    if isinstance(q, np.ndarray):
        return q
    return np.stack([cp_reconstruct(t) if isinstance(t, CpTensor) else np.asarray(t) for t in q])


def bellman_apply(m: Mmdp, pi: FactoredPolicy, q) -> np.ndarray:
    """Q'(s) = R(s) + gamma * sum_s' P(s, s') <U^pi(s'), Q(s')>."""
    v = state_values(m, pi, q)
    return m.reward + m.gamma * contract(v, m.transition, [(0, 1)])


def _policy_dynamics(m: Mmdp, pi: FactoredPolicy):
    S = m.num_states
    r_pi = np.array([expected_under_policy(m.reward[s], pi, s) for s in range(S)])
    p_pi = np.array([[expected_under_policy(m.transition[s, s2], pi, s) for s2 in range(S)]
                     for s in range(S)])
    return r_pi, p_pi


def state_value_exact(m: Mmdp, pi: FactoredPolicy) -> np.ndarray:
    """V^pi from the |S| x |S| system (I - gamma P_pi) V = R_pi."""
    r_pi, p_pi = _policy_dynamics(m, pi)
    a = np.eye(m.num_states) - m.gamma * p_pi
    try:
        return np.linalg.solve(a, r_pi)
    except np.linalg.LinAlgError as exc:  # cannot happen for gamma < 1
        raise RuntimeError("singular policy evaluation system") from exc


def policy_evaluate_exact(m: Mmdp, pi: FactoredPolicy) -> np.ndarray:
    v = state_value_exact(m, pi)
    return m.reward + m.gamma * contract(v, m.transition, [(0, 1)])


def policy_evaluate_iterative(m: Mmdp, pi: FactoredPolicy, max_iters: int, tol: float,
                              q0=None) -> tuple[np.ndarray, int]:
    """Apply the operator from ``q0`` (zeros by default) until the sup-norm
    change drops to ``tol`` or ``max_iters`` applications are used."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    q = np.zeros((m.num_states,) + m.action_shape) if q0 is None else densify(q0)
    for it in range(1, max_iters + 1):
        new = bellman_apply(m, pi, q)
        delta = np.max(np.abs(new - q))
        q = new
        if delta <= tol:
            break
    return q, it


def improve_policy(q, mode: str = "greedy", eps: float = 0.0,
                   temperature: float = 1.0) -> FactoredPolicy:
    """Factored policy from a joint Q.

    ``greedy``: epsilon-greedy around the joint argmax, factorized per agent
    (each agent puts 1 - eps + eps/U on its argmax component).
    ``softmax``: per-agent marginals of the joint softmax of Q / temperature.
    """
    q = densify(q)
    S = q.shape[0]
    n = q.ndim - 1
    U = q.shape[1]
    probs = np.empty((S, n, U))
    for s in range(S):
        if mode == "greedy":
            if not 0.0 <= eps <= 1.0:
                raise ValueError("eps must lie in [0, 1]")
            best = np.unravel_index(np.argmax(q[s]), q[s].shape)
            probs[s] = eps / U
            probs[s, np.arange(n), best] += 1.0 - eps
        elif mode == "softmax":
            if temperature <= 0:
                raise ValueError("temperature must be positive")
            z = q[s] / temperature
            joint = np.exp(z - z.max())
            joint /= joint.sum()
            for i in range(n):
                axes = tuple(a for a in range(n) if a != i)
                probs[s, i] = joint.sum(axis=axes)
            probs[s] /= probs[s].sum(axis=1, keepdims=True)
        else:
            raise ValueError(f"unknown improvement mode {mode!r}")
    return FactoredPolicy(probs)


def mean_return(m: Mmdp, pi: FactoredPolicy) -> float:
    """Average of V^pi over a uniform start state."""
    return float(np.mean(state_value_exact(m, pi)))


def policy_iteration(m: Mmdp, pi0: FactoredPolicy | None = None, max_iters: int = 1000):
    """Exact policy iteration with deterministic greedy improvement.

    Returns the final policy and the list of policies visited.  Joint
    deterministic policies are products of per-agent deterministic ones,
    so the optimum of the MMDP is reached.
    """
    pi = FactoredPolicy.uniform(m.num_states, m.num_agents, m.num_actions) if pi0 is None else pi0
    history = [pi]
    for _ in range(max_iters):
        new = improve_policy(policy_evaluate_exact(m, pi), "greedy", 0.0)
        if np.array_equal(new.probs, pi.probs):
            break
        pi = new
        history.append(pi)
    return pi, history


@dataclass
class RankBoundReport:
    bound: int
    residuals: list
    tol: float
    rank_inflated: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r <= self.tol for r in self.residuals)


def verify_rank_bound(m: Mmdp, pi: FactoredPolicy, tol: float,
                      cfg: AlsConfig | None = None) -> RankBoundReport:
    """Fit each exact Q^pi(s) at rank k1 + k2 |S| and report the residuals.

    Without ``cfg`` the fit uses 10 restarts and stops a restart once the
    residual is below ``tol / 100``.
    """
    k1, k2 = m.meta["k1"], m.meta["k2"]
    bound = k1 + k2 * m.num_states
    cfg = AlsConfig(rank=bound, max_sweeps=2000, restarts=10, tol=tol / 100) if cfg is None \
        else cfg.with_rank(bound)
    q = policy_evaluate_exact(m, pi)
    residuals = [als_decompose(q[s], cfg)[1] for s in range(m.num_states)]
    return RankBoundReport(bound, residuals, tol, list(m.meta.get("rank_inflated", [])))
