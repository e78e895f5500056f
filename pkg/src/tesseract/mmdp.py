"""Tabular MMDPs with factored joint actions, tensor games and rollouts.

Array conventions (``S`` states, ``n`` agents, ``U`` actions per agent):

* ``reward``      shape ``(S,) + (U,) * n``       reward[s] is R(s)
* ``transition``  shape ``(S, S) + (U,) * n``     transition[s, s2] is P(s, s2)
* policy ``probs`` shape ``(S, n, U)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import CpTensor, cp_reconstruct

STOCH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Mmdp:
    num_states: int
    num_agents: int
    num_actions: int
    gamma: float
    reward: np.ndarray
    transition: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S, n, U = self.num_states, self.num_agents, self.num_actions
        if S < 1 or n < 1 or U < 1:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        r = np.asarray(self.reward, dtype=np.float64)
        p = np.asarray(self.transition, dtype=np.float64)
        if r.shape != (S,) + (U,) * n:
            raise ValueError(f"reward shape {r.shape} does not match {(S,) + (U,) * n}")
        if p.shape != (S, S) + (U,) * n:
            raise ValueError(f"transition shape {p.shape} does not match {(S, S) + (U,) * n}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(p))):
            raise ValueError("non-finite dynamics")
        if np.any(p < -STOCH_TOL) or np.any(p > 1 + STOCH_TOL):
            raise ValueError("transition probabilities outside [0, 1]")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > STOCH_TOL:
            raise ValueError("transition rows do not sum to 1")
        r.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "transition", p)
        self.meta.setdefault("r_bound", float(np.max(np.abs(r))))

    @property
    def action_shape(self) -> tuple[int, ...]:
        return (self.num_actions,) * self.num_agents

    @property
    def r_bound(self) -> float:
        return self.meta["r_bound"]


@dataclass(frozen=True, eq=False)
class FactoredPolicy:
    """Independent per-agent categorical policies, ``probs[s, i, :]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError("probs must have shape (S, n, U)")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=2) - 1.0)) > STOCH_TOL:
            raise ValueError("each per-agent distribution must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, num_states, num_agents, num_actions) -> "FactoredPolicy":
        return cls(np.full((num_states, num_agents, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions) -> "FactoredPolicy":
        """``actions[s, i]`` is agent ``i``'s action in state ``s``."""
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(num_actions)[actions])

    @classmethod
    def random(cls, num_states, num_agents, num_actions, rng) -> "FactoredPolicy":
        return cls(rng.dirichlet(np.ones(num_actions), size=(num_states, num_agents)))

    @property
    def num_states(self):
        return self.probs.shape[0]

    def joint(self, s) -> np.ndarray:
        """Dense joint action distribution in state ``s``."""
        return cp_reconstruct(policy_joint_tensor(self, s))


@dataclass(frozen=True, eq=False)
class TensorGame:
    num_agents: int
    num_actions: int
    rank: int
    payoff: np.ndarray
    factors: tuple = ()

    @property
    def optimal_action(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(np.argmax(self.payoff), self.payoff.shape))

    def to_mmdp(self) -> Mmdp:
        """The game as a single-state, gamma = 0 MMDP."""
        n, U = self.num_agents, self.num_actions
        return Mmdp(1, n, U, 0.0, self.payoff[None], np.ones((1, 1) + (U,) * n),
                    meta={"source": "tensor_game", "rank": self.rank})


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``states`` has length L + 1; ``actions`` is (L, n); ``rewards`` is (L,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self):
        return len(self.rewards)

    def transitions(self):
        for t in range(len(self)):
            yield int(self.states[t]), tuple(self.actions[t]), float(self.rewards[t]), int(self.states[t + 1])


def _abs_normal_cp(rng, n, U, k):
    return [np.abs(rng.standard_normal((U, k))) for _ in range(n)]


def _rank1_sum(factors, weights=None):
    k = factors[0].shape[1]
    w = np.ones(k) if weights is None else weights
    return cp_reconstruct(CpTensor(w, factors, normalized=False))


def generate_low_rank_mmdp(num_states, num_agents, num_actions, k1, k2, gamma, seed,
                           transitions: str = "normalize") -> Mmdp:
    """Random MMDP whose reward tensors have CP rank <= ``k1``.

    Rewards are sums of ``k1`` rank-one terms with nonnegative factors,
    scaled so the largest reward is 1 (rewards lie in [0, 1]).

    ``transitions`` selects how the transition tensors are built:

    ``"normalize"``
        each unnormalized P(s, s') is a rank-``k2`` tensor with
        nonnegative factors, then the next-state slices are divided by
        their sum.  This can raise the rank; ``meta["rank_inflated"][s]``
        records whether the per-action normalizer for state ``s`` was
        non-constant.
    ``"mixture"``
        P(s, s')[u] = sum_r lambda_r(u) c_r(s') with next-state
        distributions ``c_r`` and action gates ``lambda_r`` that sum to
        one: ``k2 - 1`` scaled nonnegative rank-one gates plus their
        complement.  Each P(s, s') then has rank <= ``k2`` exactly and is
        already stochastic.
    """
    S, n, U = int(num_states), int(num_agents), int(num_actions)
    if min(S, n, U, k1, k2) < 1:
        raise ValueError("sizes and ranks must be >= 1")
    if transitions not in ("normalize", "mixture"):
        raise ValueError(f"unknown transition mode {transitions!r}")
    rng = np.random.default_rng(seed)
    acts = (U,) * n

    reward = np.stack([_rank1_sum(_abs_normal_cp(rng, n, U, k1)) for _ in range(S)])
    reward /= reward.max()

    inflated = [False] * S
    if transitions == "normalize":
        raw = np.empty((S, S) + acts)
        for s in range(S):
            for s2 in range(S):
                raw[s, s2] = _rank1_sum(_abs_normal_cp(rng, n, U, k2))
        denom = raw.sum(axis=1, keepdims=True)
        trans = raw / denom
        for s in range(S):
            d = denom[s, 0]
            inflated[s] = bool(S > 1 and np.ptp(d) > 1e-12 * np.max(d))
    else:
        trans = np.empty((S, S) + acts)
        for s in range(S):
            gates = [_rank1_sum(_abs_normal_cp(rng, n, U, 1)) for _ in range(k2 - 1)]
            total = sum(gates) if gates else np.zeros(acts)
            if gates:
                # leave headroom so the complement gate stays strictly positive
                c = rng.uniform(0.5, 0.95) / total.max()
                gates = [g * c for g in gates]
                total = total * c
            gates.append(1.0 - total)
            dists = rng.dirichlet(np.ones(S), size=k2)
            trans[s] = np.einsum("rt,r...->t...", dists, np.stack(gates))
    meta = {"k1": int(k1), "k2": int(k2), "seed": seed, "transitions": transitions,
            "rank_inflated": inflated}
    return Mmdp(S, n, U, float(gamma), reward, trans, meta=meta)


def generate_tensor_game(num_agents, num_actions, rank, seed, allow_dependent=False) -> TensorGame:
    """Payoff = sum of ``rank`` outer products of |N(0,1)| vectors, max entry 1.

    Per agent the ``rank`` vectors are linearly independent, which needs
    ``rank <= num_actions``.  With ``allow_dependent=True`` larger ranks
    are accepted and the vectors are simply drawn i.i.d.
    """
    n, U, r = int(num_agents), int(num_actions), int(rank)
    if min(n, U, r) < 1:
        raise ValueError("sizes must be >= 1")
    if r > U and not allow_dependent:
        raise ValueError(f"cannot draw {r} linearly independent vectors in dimension {U}")
    rng = np.random.default_rng(seed)
    factors = []
    for _ in range(n):
        while True:
            f = np.abs(rng.standard_normal((U, r)))
            if r > U or np.linalg.svd(f, compute_uv=False)[-1] > 1e-9:
                break
        factors.append(f)
    payoff = _rank1_sum(factors)
    payoff /= payoff.max()
    return TensorGame(n, U, r, payoff, tuple(factors))


def sample_transition(m: Mmdp, s: int, u, rng: np.random.Generator) -> tuple[int, float]:
    u = tuple(int(a) for a in u)
    probs = m.transition[(s, slice(None)) + u]
    s2 = int(rng.choice(m.num_states, p=probs / probs.sum()))
    return s2, float(m.reward[(s,) + u])


def sample_actions(pi: FactoredPolicy, s: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Joint action(s) with each agent sampled independently."""
    p = pi.probs[s]
    n, U = p.shape
    count = 1 if size is None else size
    cdf = np.cumsum(p, axis=1)
    draws = rng.random((count, n))
    acts = np.minimum((draws[:, :, None] > cdf[None]).sum(axis=2), U - 1)
    return acts[0] if size is None else acts


def rollout(m: Mmdp, pi: FactoredPolicy, length: int, rng: np.random.Generator,
            start: int | None = None) -> Trajectory:
    """Fixed-horizon episode; the start state is uniform unless given."""
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    S, n = m.num_states, m.num_agents
    states = np.empty(length + 1, dtype=np.int64)
    actions = np.empty((length, n), dtype=np.int64)
    rewards = np.empty(length)
    states[0] = rng.integers(S) if start is None else start
    flat_p = m.transition.reshape(S, S, -1)
    flat_r = m.reward.reshape(S, -1)
    for t in range(length):
        s = states[t]
        u = sample_actions(pi, s, rng)
        j = np.ravel_multi_index(tuple(u), m.action_shape)
        actions[t] = u
        rewards[t] = flat_r[s, j]
        cdf = np.cumsum(flat_p[s, :, j])
        states[t + 1] = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), S - 1)
    return Trajectory(states, actions, rewards)


def policy_joint_tensor(pi: FactoredPolicy, s: int) -> CpTensor:
    """Rank-one CP tensor of the joint action distribution in state ``s``."""
    return CpTensor([1.0], [pi.probs[s, i][:, None] for i in range(pi.probs.shape[1])],
                    normalized=False)


def min_policy_mass(pi: FactoredPolicy) -> float:
    return float(np.min(np.prod(pi.probs.min(axis=2), axis=1)))


# ---------------------------------------------------------------------------
# text serialization

FORMAT_HEADER = "# tesseract-env v1"


def _fmt_block(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    lines = [f"[{name}]", "shape = " + " ".join(str(d) for d in arr.shape)]
    lines += [f"{x:.17g}" for x in arr.ravel()]
    return lines


def dumps_env(env) -> str:
    """Serialize an ``Mmdp`` or ``TensorGame`` (format documented in the README)."""
    if isinstance(env, Mmdp):
        lines = [FORMAT_HEADER, "kind = mmdp", f"num_states = {env.num_states}",
                 f"num_agents = {env.num_agents}", f"num_actions = {env.num_actions}",
                 f"gamma = {env.gamma:.17g}"]
        lines += _fmt_block("reward", env.reward) + _fmt_block("transition", env.transition)
    elif isinstance(env, TensorGame):
        lines = [FORMAT_HEADER, "kind = tensor_game", f"num_agents = {env.num_agents}",
                 f"num_actions = {env.num_actions}", f"rank = {env.rank}"]
        lines += _fmt_block("payoff", env.payoff)
    else:
        raise TypeError(f"cannot serialize {type(env).__name__}")
    return "\n".join(lines) + "\n"


def loads_env(text: str):
    header, blocks, cur = {}, {}, None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            cur = line.strip("[]")
            blocks[cur] = {"shape": None, "values": []}
        elif "=" in line:
            key, val = (x.strip() for x in line.split("=", 1))
            if cur is None:
                header[key] = val
            else:
                blocks[cur][key] = tuple(int(d) for d in val.split())
        else:
            blocks[cur]["values"].append(float(line))
    arrays = {k: np.array(b["values"]).reshape(b["shape"]) for k, b in blocks.items()}
    kind = header.get("kind")
    if kind == "mmdp":
        return Mmdp(int(header["num_states"]), int(header["num_agents"]),
                    int(header["num_actions"]), float(header["gamma"]),
                    arrays["reward"], arrays["transition"])
    if kind == "tensor_game":
        return TensorGame(int(header["num_agents"]), int(header["num_actions"]),
                          int(header["rank"]), arrays["payoff"])
    raise ValueError(f"unknown environment kind {kind!r}")


def save_env(env, path) -> None:
    Path(path).write_text(dumps_env(env))


def load_env(path):
    return loads_env(Path(path).read_text())
