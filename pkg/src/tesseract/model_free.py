"""Model-free actor-critic with a rank-k CP critic, plus baselines.

For stateless tensor games the critic factors and policy logits are free
parameter tables (no networks).  The critic value of joint action ``u`` is

    Q(u) = min(sum_r w_r prod_i c * sigmoid(raw[i, r, u_i]), r_max)

evaluated in factored form.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .mmdp import TensorGame
from .tensor_core import CpTensor

CURVE_FIELDS = ("schema_version", "step", "greedy_payoff", "mean_batch_payoff",
                "entropy_coef", "temperature", "wall_ms")
SCHEMA_VERSION = 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def clip_by_norm(grads: list, max_norm: float | None) -> list:
    """Scale a group of gradient arrays so their joint L2 norm <= max_norm."""
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0:
        return grads
    return [g * (max_norm / total) for g in grads]


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, key, param, grad):
        return param - self.lr * grad


class Adam:
    """Adam with bias correction; one moment pair per parameter key."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def step(self, key, param, grad):
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[key] = (m, v, t)
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return param - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return Sgd(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# critic


@dataclass
class CriticParams:
    weights: np.ndarray
    raw: np.ndarray  # (n, k, U), pre-squash
    scale: float = 2.0

    @classmethod
    def init(cls, num_agents, num_actions, rank, rng, std=0.1, scale=2.0):
        return cls(np.ones(rank), rng.normal(0.0, std, (num_agents, rank, num_actions)), scale)

    @property
    def rank(self):
        return self.weights.size

    def effective(self) -> np.ndarray:
        return self.scale * sigmoid(self.raw)

    def as_cp(self) -> CpTensor:
        eff = self.effective()
        return CpTensor(self.weights, [eff[i].T for i in range(eff.shape[0])], normalized=False)


def _gather(eff, actions):
    """eff[i, :, actions[b, i]] as a (B, n, k) array."""
    n = eff.shape[0]
    return eff[np.arange(n)[None, :], :, actions]


def critic_q(p: CriticParams, actions, r_max: float | None = None) -> np.ndarray:
    """Critic value for a batch of joint actions, shape (B, n) -> (B,)."""
    acts = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    q = np.prod(_gather(p.effective(), acts), axis=1) @ p.weights
    return q if r_max is None else np.minimum(q, r_max)


def _leave_one_out_prod(x, axis):
    """Product over ``axis`` excluding each position in turn (no division)."""
    x = np.moveaxis(x, axis, 0)
    pre = np.cumprod(np.concatenate([np.ones_like(x[:1]), x[:-1]]), axis=0)
    suf = np.cumprod(np.concatenate([np.ones_like(x[:1]), x[:0:-1]]), axis=0)[::-1]
    return np.moveaxis(pre * suf, 0, axis)


def critic_loss(p: CriticParams, actions, targets, r_max=None) -> float:
    err = critic_q(p, actions, r_max) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(err * err))


def critic_grad(p: CriticParams, actions, targets, r_max=None):
    """Gradient of the mean squared TD error.

    Returns ``(grad_weights, grad_raw)``.  Samples whose value is clipped
    at ``r_max`` contribute no gradient.
    """
    acts = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty batch")
    eff = p.effective()
    g = _gather(eff, acts)  # (B, n, k)
    terms = np.prod(g, axis=1)  # (B, k)
    q = terms @ p.weights
    active = np.ones_like(q) if r_max is None else (q < r_max).astype(float)
    dq = 2.0 * (q - y) * active / len(y)
    grad_w = dq @ terms
    # d q / d eff[i, r, u_i] = w_r * prod_{j != i} eff[j, r, u_j]
    loo = _leave_one_out_prod(g, axis=1)  # (B, n, k)
    d_eff = dq[:, None, None] * p.weights[None, None, :] * loo
    d_eff *= g * (1.0 - g / p.scale)  # sigmoid' scaled
    n, k, U = p.raw.shape
    grad_raw = np.zeros((n, U, k))
    np.add.at(grad_raw, (np.broadcast_to(np.arange(n), acts.shape), acts), d_eff)
    return grad_w, grad_raw.transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# multi-step targets and advantages


def multi_step_targets(rewards, values, gamma, lam, horizon=None, terminal=True) -> np.ndarray:
    """lambda-weighted mix of k-step returns, normalized by the weights.

    ``values`` holds V(s_0) .. V(s_L) (length L + 1).  The k-step return
    from t is R_t + ... + gamma^(k-1) R_(t+k-1) + gamma^k V(s_(t+k)), for
    k = 1 .. min(horizon, L - t); term k carries weight lam^(k-1).  With
    ``terminal`` the value of the final state is taken as 0.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.array(values, dtype=np.float64)
    L = len(r)
    if len(v) != L + 1:
        raise ValueError("values must have one more entry than rewards")
    if terminal:
        v[L] = 0.0
    out = np.empty(L)
    for t in range(L):
        kmax = L - t if horizon is None else min(horizon, L - t)
        ks = np.arange(1, kmax + 1)
        disc = gamma ** np.arange(kmax)
        partial = np.cumsum(disc * r[t:t + kmax])
        g = partial + gamma ** ks * v[t + ks]
        w = lam ** (ks - 1)
        out[t] = np.dot(w, g) / w.sum()
    return out


def gae_advantages(rewards, values, q_next, gamma, lam, terminal=True) -> np.ndarray:
    """A_t = sum_k (gamma lam)^k delta_(t+k), delta_t = R_t + gamma Q(s_(t+1), u_(t+1)) - V(s_t).

    ``values`` is V(s_t) and ``q_next`` is Q(s_(t+1), u_(t+1)), both length
    L.  With ``terminal`` the bootstrap of the last step is 0.
    """
    r = np.asarray(rewards, dtype=np.float64)
    qn = np.array(q_next, dtype=np.float64)
    if terminal:
        qn[-1] = 0.0
    delta = r + gamma * qn - np.asarray(values, dtype=np.float64)
    adv = np.empty_like(delta)
    acc = 0.0
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv


# ---------------------------------------------------------------------------
# actor


@dataclass
class ActorParams:
    logits: np.ndarray  # (n, U)

    def policy(self, tau: float = 1.0) -> np.ndarray:
        if tau <= 0:
            raise ValueError("temperature must be positive")
        return softmax(self.logits / tau, axis=1)

    def greedy(self) -> tuple[int, ...]:
        return tuple(int(a) for a in np.argmax(self.logits, axis=1))


def temperature(step, total_steps) -> float:
    return 2.0 * total_steps / (total_steps + step)


def entropy_coef(step, total_steps, start=0.1, halvings=10) -> float:
    period = max(total_steps // halvings, 1)
    return start * 0.5 ** (step // period)


def actor_objective(a: ActorParams, actions, advantages, ent_coef, tau) -> float:
    acts = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    p = a.policy(tau)
    n = p.shape[0]
    logp = np.log(p[np.arange(n)[None, :], acts]).sum(axis=1)
    ent = -np.sum(p * np.log(p))
    return float(np.mean(np.asarray(advantages) * logp) + ent_coef * ent)


def actor_grad(a: ActorParams, actions, advantages, ent_coef, tau) -> np.ndarray:
    """Gradient of ``actor_objective`` w.r.t. the logits."""
    acts = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    p = a.policy(tau)
    n, U = p.shape
    counts = np.zeros((n, U))
    np.add.at(counts, (np.broadcast_to(np.arange(n), acts.shape), acts), adv[:, None])
    g = (counts - adv.sum() * p) / (len(adv) * tau)
    logp = np.log(p)
    h = -np.sum(p * logp, axis=1, keepdims=True)
    g += ent_coef * (-(p * (logp + h)) / tau)
    return g


def actor_step(a: ActorParams, actions, advantages, ent_coef, tau, lr=0.01,
               grad_norm: float | None = 0.5, optimizer=None, l2=0.0) -> ActorParams:
    """One ascent step on the policy objective (gradient clipped to grad_norm)."""
    g = actor_grad(a, actions, advantages, ent_coef, tau) - l2 * a.logits
    (g,) = clip_by_norm([g], grad_norm)
    opt = optimizer if optimizer is not None else Sgd(lr)
    return ActorParams(opt.step("actor", a.logits, -g))


def baseline_grad(v: float, targets) -> float:
    return float(2.0 * np.mean(v - np.asarray(targets, dtype=np.float64)))


# ---------------------------------------------------------------------------
# training on tensor games


@dataclass
class MfConfig:
    rank: int = 2
    lr: float = 0.01
    batch_size: int = 32
    total_steps: int | None = None  # None: |U|^n / 10
    entropy_start: float = 0.1
    entropy_halvings: int = 10
    gamma: float = 0.99
    lam: float = 0.95
    r_max: float | None = 2.0
    grad_norm: float | None = 0.5
    l2: float = 0.001
    optimizer: str = "adam"
    critic_scale: float = 2.0
    init_std: float = 0.1
    eval_interval: int = 100
    vdn_eps_start: float = 0.9
    vdn_eps_end: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("rank, batch_size and eval_interval must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    def steps_for(self, game: TensorGame) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return max(1, game.num_actions ** game.num_agents // 10)


@dataclass
class LearningCurve:
    algorithm: str
    step: list = field(default_factory=list)
    greedy_payoff: list = field(default_factory=list)
    mean_batch_payoff: list = field(default_factory=list)
    entropy_coef: list = field(default_factory=list)
    temperature: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def record(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    @property
    def final(self) -> float:
        return self.greedy_payoff[-1]

    def steps_to(self, threshold: float) -> int | None:
        for s, g in zip(self.step, self.greedy_payoff):
            if g >= threshold:
                return s
        return None

    def rows(self):
        for i in range(len(self.step)):
            yield {"schema_version": SCHEMA_VERSION, "step": self.step[i],
                   "greedy_payoff": self.greedy_payoff[i],
                   "mean_batch_payoff": self.mean_batch_payoff[i],
                   "entropy_coef": self.entropy_coef[i], "temperature": self.temperature[i],
                   "wall_ms": self.wall_ms[i]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            w.writeheader()
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path, algorithm=""):
        curve = cls(algorithm)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.record(step=int(row["step"]),
                             **{k: float(row[k]) for k in CURVE_FIELDS[2:]})
        return curve


def _sample_joint(probs, batch, rng):
    n, U = probs.shape
    cdf = np.cumsum(probs, axis=1)
    draws = rng.random((batch, n))
    return np.minimum((draws[:, :, None] > cdf[None]).sum(axis=2), U - 1)


def _payoff(game, acts):
    return game.payoff[tuple(acts.T)]


def _greedy_payoff(game, acts):
    return float(game.payoff[tuple(acts)])


def _policy_gradient_loop(game: TensorGame, cfg: MfConfig, use_critic: bool) -> LearningCurve:
    rng = np.random.default_rng(cfg.seed)
    n, U = game.num_agents, game.num_actions
    T = cfg.steps_for(game)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    actor = ActorParams(np.zeros((n, U)))
    critic = CriticParams.init(n, U, cfg.rank, rng, cfg.init_std, cfg.critic_scale)
    v = np.zeros(1)
    curve = LearningCurve("tac" if use_critic else "iac")
    t0 = time.perf_counter()
    batch_payoff = 0.0
    for t in range(T + 1):
        tau = temperature(t, T)
        beta = entropy_coef(t, T, cfg.entropy_start, cfg.entropy_halvings)
        if t % cfg.eval_interval == 0 or t == T:
            curve.record(step=t, greedy_payoff=_greedy_payoff(game, actor.greedy()),
                         mean_batch_payoff=batch_payoff, entropy_coef=beta, temperature=tau,
                         wall_ms=1000.0 * (time.perf_counter() - t0))
        if t == T:
            break
        acts = _sample_joint(actor.policy(tau), cfg.batch_size, rng)
        r = _payoff(game, acts)
        batch_payoff = float(r.mean())
        if use_critic:
            gw, graw = critic_grad(critic, acts, r, cfg.r_max)
            gw, graw = clip_by_norm([gw + cfg.l2 * critic.weights, graw + cfg.l2 * critic.raw],
                                    cfg.grad_norm)
            critic = CriticParams(opt.step("critic_w", critic.weights, gw),
                                  opt.step("critic_raw", critic.raw, graw), critic.scale)
        (gv,) = clip_by_norm([np.array([baseline_grad(v[0], r)]) + cfg.l2 * v], cfg.grad_norm)
        v = opt.step("baseline", v, gv)
        if use_critic:
            adv = critic_q(critic, acts, cfg.r_max) - v[0]
        else:
            adv = r - v[0]
        actor = actor_step(actor, acts, adv, beta, tau, cfg.lr, cfg.grad_norm, opt, cfg.l2)
    return curve


def train_tensor_game(game: TensorGame, cfg: MfConfig) -> LearningCurve:
    """Actor-critic with the rank-``cfg.rank`` CP critic (stateless game).

    Each step draws ``batch_size`` joint actions from the current policy;
    the critic regresses onto the observed payoffs, a scalar baseline
    tracks the mean payoff and the actor ascends on clip(Q) - V.
    """
    return _policy_gradient_loop(game, cfg, use_critic=True)


def train_iac(game: TensorGame, cfg: MfConfig) -> LearningCurve:
    """Independent REINFORCE actors sharing a scalar baseline, no critic."""
    return _policy_gradient_loop(game, cfg, use_critic=False)


def vdn_epsilon(step, total_steps, start=0.9, end=0.05) -> float:
    half = total_steps / 2.0
    if step >= half:
        return end
    return start + (end - start) * step / half


def vdn_grad(utilities, actions, targets):
    """Gradient of the mean squared error of sum_i q_i(u_i) against targets."""
    acts = np.atleast_2d(np.asarray(actions, dtype=np.int64))
    n, U = utilities.shape
    q = utilities[np.arange(n)[None, :], acts].sum(axis=1)
    dq = 2.0 * (q - np.asarray(targets, dtype=np.float64)) / len(q)
    g = np.zeros((n, U))
    np.add.at(g, (np.broadcast_to(np.arange(n), acts.shape), acts), dq[:, None])
    return g


def train_vdn(game: TensorGame, cfg: MfConfig) -> LearningCurve:
    """Additive per-agent utilities with epsilon-greedy exploration."""
    rng = np.random.default_rng(cfg.seed)
    n, U = game.num_agents, game.num_actions
    T = cfg.steps_for(game)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    q = rng.normal(0.0, cfg.init_std, (n, U))
    curve = LearningCurve("vdn")
    t0 = time.perf_counter()
    batch_payoff = 0.0
    for t in range(T + 1):
        eps = vdn_epsilon(t, T, cfg.vdn_eps_start, cfg.vdn_eps_end)
        if t % cfg.eval_interval == 0 or t == T:
            greedy = tuple(int(a) for a in np.argmax(q, axis=1))
            curve.record(step=t, greedy_payoff=_greedy_payoff(game, greedy),
                         mean_batch_payoff=batch_payoff, entropy_coef=eps,
                         temperature=0.0, wall_ms=1000.0 * (time.perf_counter() - t0))
        if t == T:
            break
        explore = rng.random((cfg.batch_size, n)) < eps
        acts = np.where(explore, rng.integers(U, size=(cfg.batch_size, n)),
                        np.argmax(q, axis=1)[None, :])
        r = _payoff(game, acts)
        batch_payoff = float(r.mean())
        (g,) = clip_by_norm([vdn_grad(q, acts, r) + cfg.l2 * q], cfg.grad_norm)
        q = opt.step("vdn", q, g)
    return curve


# ---------------------------------------------------------------------------
# representability reductions


def vdn_to_cp(utilities) -> CpTensor:
    """Rank-one CP tensor equal to exp of the additive joint Q."""
    facs = [np.exp(np.asarray(u, dtype=np.float64)).reshape(-1, 1) for u in utilities]
    return CpTensor([1.0], facs, normalized=False)


def fql_to_cp(q_i, f_i) -> CpTensor:
    """CP tensor of rank d * C(n, 2) + n reproducing a pairwise-factorized Q.

    Q(u) = sum_i q_i(u_i) + sum_{i > j} <f_i(u_i), f_j(u_j)>.  Each pair
    (i, j) owns a block of d columns in which agents i and j carry their
    feature vectors and every other agent a column of ones; the last n
    columns carry the per-agent terms q_i the same way.
    """
    q_i = [np.asarray(q, dtype=np.float64).reshape(-1) for q in q_i]
    f_i = [np.asarray(f, dtype=np.float64) for f in f_i]
    n = len(q_i)
    if len(f_i) != n:
        raise ValueError("need one feature matrix per agent")
    U = q_i[0].size
    d = f_i[0].shape[1]
    if any(q.size != U for q in q_i) or any(f.shape != (U, d) for f in f_i):
        raise ValueError("inconsistent dimensions")
    pairs = [(i, j) for i in range(n) for j in range(i)]
    D = d * len(pairs) + n
    facs = [np.ones((U, D)) for _ in range(n)]
    for k, (i, j) in enumerate(pairs):
        cols = slice(k * d, (k + 1) * d)
        facs[i][:, cols] = f_i[i]
        facs[j][:, cols] = f_i[j]
    for i in range(n):
        facs[i][:, D - n + i] = q_i[i]
    return CpTensor(np.ones(D), facs, normalized=False)
