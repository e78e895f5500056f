import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tesseract.mmdp import TensorGame, generate_tensor_game
from tesseract.model_free import (CURVE_FIELDS, Adam, ActorParams, CriticParams, LearningCurve,
                                  MfConfig, Sgd, actor_grad, actor_objective, actor_step,
                                  baseline_grad, clip_by_norm, critic_grad, critic_loss, critic_q,
                                  entropy_coef, fql_to_cp, gae_advantages, make_optimizer,
                                  multi_step_targets, softmax, temperature, train_iac,
                                  train_tensor_game, train_vdn, vdn_epsilon, vdn_grad, vdn_to_cp)
from tesseract.tensor_core import cp_inner_product, cp_reconstruct

H = 1e-5


def fd(f, x):
    """Central finite-difference gradient of scalar f at array x (modified in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + H
        up = f()
        x[i] = old - H
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * H)
    return g


def random_critic(rng, n=3, k=2, U=4):
    return CriticParams(rng.uniform(0.5, 1.5, k), rng.normal(0, 1, (n, k, U)))


def test_helpers():
    np.testing.assert_allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax(np.array([1000.0, 0.0])), [1.0, 0.0])
    g = clip_by_norm([np.array([3.0]), np.array([4.0])], 1.0)
    np.testing.assert_allclose(np.concatenate(g), [0.6, 0.8])
    assert clip_by_norm([np.array([0.1])], None)[0][0] == 0.1
    assert isinstance(make_optimizer("sgd", 0.1), Sgd)
    assert isinstance(make_optimizer("adam", 0.1), Adam)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)
    with pytest.raises(ValueError):
        MfConfig(lr=0.0)


def test_adam_first_step_is_lr_sized():
    opt = Adam(0.1)
    out = opt.step("x", np.array([1.0, 1.0]), np.array([5.0, -0.01]))
    np.testing.assert_allclose(out, [0.9, 1.1], atol=1e-6)


def test_critic_q_examples():
    rng = np.random.default_rng(0)
    p = random_critic(rng)
    dense = cp_reconstruct(p.as_cp())
    acts = np.array(list(itertools.product(range(4), repeat=3)))
    np.testing.assert_allclose(critic_q(p, acts), dense[tuple(acts.T)], atol=1e-12)
    vecs = rng.random((3, 4))
    want = np.einsum("abc,a,b,c->", dense, *vecs)
    assert cp_inner_product(p.as_cp(), list(vecs)) == pytest.approx(want, rel=1e-12)
    assert np.all(critic_q(p, acts, r_max=0.5) <= 0.5)
    eff = p.effective()
    assert np.all((eff > 0) & (eff < p.scale))
    zero = CriticParams(np.ones(1), np.zeros((2, 1, 3)))
    assert critic_q(zero, [0, 2])[0] == pytest.approx(1.0)


@pytest.mark.parametrize("draw", range(20))
def test_critic_grad_finite_difference(draw):
    rng = np.random.default_rng(draw)
    p = random_critic(rng)
    acts = rng.integers(4, size=(8, 3))
    y = rng.normal(0, 1, 8)
    r_max = None if draw % 2 else 50.0
    gw, graw = critic_grad(p, acts, y, r_max)

    def loss():
        return critic_loss(p, acts, y, r_max)

    assert np.max(np.abs(gw - fd(loss, p.weights))) < 1e-4
    assert np.max(np.abs(graw - fd(loss, p.raw))) < 1e-4


def test_clipped_samples_give_no_gradient():
    p = CriticParams(np.ones(1), np.full((2, 1, 2), 5.0))  # q ~ 4 everywhere
    gw, graw = critic_grad(p, [[0, 1]], [0.0], r_max=1.0)
    assert gw[0] == 0.0 and np.all(graw == 0.0)
    with pytest.raises(ValueError):
        critic_grad(p, np.zeros((0, 2), dtype=int), [], None)


@pytest.mark.parametrize("draw", range(20))
def test_actor_grad_finite_difference(draw):
    rng = np.random.default_rng(100 + draw)
    a = ActorParams(rng.normal(0, 1, (3, 4)))
    acts = rng.integers(4, size=(6, 3))
    adv = rng.normal(0, 1, 6)
    ent, tau = rng.uniform(0, 0.2), rng.uniform(1, 2)
    g = actor_grad(a, acts, adv, ent, tau)
    num = fd(lambda: actor_objective(a, acts, adv, ent, tau), a.logits)
    assert np.max(np.abs(g - num)) < 1e-4


@pytest.mark.parametrize("draw", range(20))
def test_baseline_and_vdn_grad_finite_difference(draw):
    rng = np.random.default_rng(200 + draw)
    y = rng.normal(0, 1, 5)
    v = np.array([rng.normal()])
    num = fd(lambda: float(np.mean((v[0] - y) ** 2)), v)
    assert abs(baseline_grad(v[0], y) - num[0]) < 1e-4
    q = rng.normal(0, 1, (3, 4))
    acts = rng.integers(4, size=(7, 3))
    t = rng.normal(0, 1, 7)

    def loss():
        return float(np.mean((q[np.arange(3)[None, :], acts].sum(axis=1) - t) ** 2))

    assert np.max(np.abs(vdn_grad(q, acts, t) - fd(loss, q))) < 1e-4


def test_schedules():
    assert temperature(0, 1000) == 2.0 and temperature(1000, 1000) == 1.0
    assert entropy_coef(0, 1000) == 0.1
    assert entropy_coef(100, 1000) == 0.05
    assert entropy_coef(999, 1000) == pytest.approx(0.1 * 0.5 ** 9)
    assert vdn_epsilon(0, 1000) == 0.9
    assert vdn_epsilon(500, 1000) == 0.05
    assert vdn_epsilon(250, 1000) == pytest.approx(0.475)


def targets_oracle(r, v, gamma, lam):
    L = len(r)
    v = np.array(v, dtype=float)
    v[L] = 0.0
    out = np.zeros(L)
    for t in range(L):
        num = den = 0.0
        for k in range(1, L - t + 1):
            g = 0.0
            for j in range(k):
                g += gamma ** j * r[t + j]
            g += gamma ** k * v[t + k]
            num += lam ** (k - 1) * g
            den += lam ** (k - 1)
        out[t] = num / den
    return out


def test_multi_step_targets_oracle():
    rng = np.random.default_rng(3)
    r, v = rng.normal(0, 1, 64), rng.normal(0, 1, 65)
    np.testing.assert_allclose(multi_step_targets(r, v, 0.99, 0.95),
                               targets_oracle(r, v, 0.99, 0.95), atol=1e-10)


def test_multi_step_targets_edges():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([10.0, 20.0, 30.0, 40.0])
    # lam = 0 gives one-step TD targets
    np.testing.assert_allclose(multi_step_targets(r, v, 0.5, 0.0, terminal=False),
                               r + 0.5 * v[1:])
    # gamma = 0 gives immediate rewards
    np.testing.assert_allclose(multi_step_targets(r, v, 0.0, 0.9), r)
    np.testing.assert_allclose(multi_step_targets([2.0], [5.0, 7.0], 0.9, 0.9), [2.0])
    np.testing.assert_allclose(multi_step_targets(r, v, 0.5, 1.0, horizon=1, terminal=False),
                               r + 0.5 * v[1:])
    with pytest.raises(ValueError):
        multi_step_targets(r, v[:3], 0.9, 0.9)


def test_gae_oracle_and_edges():
    rng = np.random.default_rng(4)
    r, v, qn = rng.normal(0, 1, (3, 30))
    gamma, lam = 0.99, 0.95
    qt = qn.copy()
    qt[-1] = 0.0
    delta = r + gamma * qt - v
    expect = [sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, 30)) for t in range(30)]
    np.testing.assert_allclose(gae_advantages(r, v, qn, gamma, lam), expect, atol=1e-10)
    np.testing.assert_allclose(gae_advantages(r, v, qn, gamma, 0.0, terminal=False),
                               r + gamma * qn - v)
    np.testing.assert_allclose(gae_advantages([1.0], [0.5], [9.0], 0.9, 0.9), [0.5])


def test_multi_state_smoke():
    # targets and advantages on a short trajectory from a 2-state chain
    rewards = np.array([1.0, 0.0, 1.0, 0.0])
    values = np.array([2.0, 1.0, 2.0, 1.0, 2.0])
    tg = multi_step_targets(rewards, values, 0.9, 0.9, terminal=False)
    adv = gae_advantages(rewards, values[:-1], values[1:], 0.9, 0.9, terminal=False)
    assert tg.shape == adv.shape == (4,)
    assert np.all(np.isfinite(tg)) and np.all(np.isfinite(adv))


def test_actor_step():
    a = ActorParams(np.zeros((2, 3)))
    same = actor_step(a, [[0, 1]], [0.0], 0.0, 1.0, lr=0.1)
    np.testing.assert_array_equal(same.logits, a.logits)
    up = actor_step(a, [[0, 1]], [1.0], 0.0, 1.0, lr=0.1, grad_norm=None)
    assert up.logits[0, 0] > 0 and up.logits[1, 1] > 0 and up.logits[0, 1] < 0
    down = actor_step(a, [[0, 1]], [-1.0], 0.0, 1.0, lr=0.1)
    assert down.logits[0, 0] < 0
    with pytest.raises(ValueError):
        a.policy(0.0)


def test_vdn_to_cp():
    t = cp_reconstruct(vdn_to_cp([np.log([1.0, 2.0]), np.log([1.0, 3.0])]))
    np.testing.assert_allclose(t, [[1, 3], [2, 6]])


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 4), st.integers(2, 3), st.integers(1, 3), st.integers(0, 10**6))
def test_fql_to_cp_oracle(n, U, d, seed):
    rng = np.random.default_rng(seed)
    q = [rng.normal(0, 1, U) for _ in range(n)]
    f = [rng.normal(0, 1, (U, d)) for _ in range(n)]
    cp = fql_to_cp(q, f)
    assert cp.rank == d * n * (n - 1) // 2 + n
    dense = cp_reconstruct(cp)
    for u in itertools.product(range(U), repeat=n):
        want = sum(q[i][u[i]] for i in range(n))
        want += sum(f[i][u[i]] @ f[j][u[j]] for i in range(n) for j in range(i))
        assert dense[u] == pytest.approx(want, abs=1e-10)


def test_fql_to_cp_rejects_mismatch():
    with pytest.raises(ValueError):
        fql_to_cp([np.zeros(2)] * 2, [np.zeros((2, 1))])


def test_training_bit_reproducible():
    g = generate_tensor_game(3, 4, 2, seed=0)
    cfg = MfConfig(total_steps=300, seed=5)
    for train in (train_tensor_game, train_iac, train_vdn):
        a, b = train(g, cfg), train(g, cfg)
        assert a.greedy_payoff == b.greedy_payoff
        assert a.mean_batch_payoff == b.mean_batch_payoff


def test_rank1_game_solved():
    g = generate_tensor_game(3, 4, 1, seed=1)
    curve = train_tensor_game(g, MfConfig(rank=1, total_steps=2000, seed=0))
    assert curve.final >= 1 - 1e-3


def test_small_game_reaches_threshold():
    g = generate_tensor_game(3, 4, 2, seed=2)
    curve = train_tensor_game(g, MfConfig(rank=2, total_steps=5000, seed=0))
    assert curve.steps_to(0.9) is not None and curve.steps_to(0.9) <= 5000


def test_vdn_solves_additive_game():
    rng = np.random.default_rng(3)
    parts = [rng.random(4) for _ in range(3)]
    payoff = sum(np.meshgrid(*parts, indexing="ij"))
    payoff /= payoff.max()
    g = TensorGame(3, 4, 1, payoff)
    assert g.optimal_action == tuple(int(np.argmax(p)) for p in parts)
    curve = train_vdn(g, MfConfig(total_steps=2000, seed=0))
    assert curve.final == pytest.approx(1.0)


def test_learning_curve_csv_round_trip(tmp_path):
    g = generate_tensor_game(2, 3, 1, seed=4)
    curve = train_iac(g, MfConfig(total_steps=250, eval_interval=50, seed=1))
    assert curve.step == [0, 50, 100, 150, 200, 250]
    path = tmp_path / "curve.csv"
    curve.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(CURVE_FIELDS)
    back = LearningCurve.from_csv(path, "iac")
    assert back.step == curve.step
    np.testing.assert_allclose(back.greedy_payoff, curve.greedy_payoff)
    assert back.steps_to(2.0) is None
