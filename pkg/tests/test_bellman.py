import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tesseract.bellman import (bellman_apply, expected_under_policy, improve_policy, mean_return,
                               policy_evaluate_exact, policy_evaluate_iterative, policy_iteration,
                               state_value_exact, verify_rank_bound)
from tesseract.cp_decomp import AlsConfig, als_decompose
from tesseract.harness.experiments import scalar_backup
from tesseract.mmdp import FactoredPolicy, Mmdp, generate_low_rank_mmdp, rollout
from tesseract.tensor_core import random_cp


def instance(seed, S=2, n=2, U=2, gamma=0.9, mode="mixture"):
    m = generate_low_rank_mmdp(S, n, U, 2, 2, gamma, seed, transitions=mode)
    pi = FactoredPolicy.random(S, n, U, np.random.default_rng(seed + 100))
    return m, pi


def test_gamma_zero_backup_is_reward():
    m, pi = instance(0, gamma=0.0)
    q = np.random.default_rng(0).standard_normal((2, 2, 2))
    np.testing.assert_array_equal(bellman_apply(m, pi, q), m.reward)
    np.testing.assert_array_equal(policy_evaluate_exact(m, pi), m.reward)
    _, iters = policy_evaluate_iterative(m, pi, 50, 1e-12)
    assert iters <= 2


def test_single_state_self_loop_closed_form():
    r = np.random.default_rng(1).random((1, 3, 3))
    m = Mmdp(1, 2, 3, 0.7, r, np.ones((1, 1, 3, 3)))
    pi = FactoredPolicy.uniform(1, 2, 3)
    q = np.random.default_rng(2).standard_normal((1, 3, 3))
    np.testing.assert_allclose(bellman_apply(m, pi, q), r + 0.7 * q.mean(), atol=1e-14)


def test_geometric_series():
    m = Mmdp(1, 2, 2, 0.5, np.ones((1, 2, 2)), np.ones((1, 1, 2, 2)))
    np.testing.assert_allclose(policy_evaluate_exact(m, FactoredPolicy.uniform(1, 2, 2)), 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_backup_matches_scalar_loops(seed):
    m, pi = instance(seed, S=3, n=3, U=3, mode="normalize")
    q = np.random.default_rng(seed).standard_normal((3, 3, 3, 3))
    np.testing.assert_allclose(bellman_apply(m, pi, q), scalar_backup(m, pi, q), atol=1e-10)


def test_cp_and_dense_q_agree():
    m, pi = instance(3, S=2, n=3, U=3)
    rng = np.random.default_rng(4)
    cps = [random_cp((3, 3, 3), 2, rng) for _ in range(2)]
    from tesseract.tensor_core import cp_reconstruct
    dense = np.stack([cp_reconstruct(t) for t in cps])
    np.testing.assert_allclose(bellman_apply(m, pi, cps), bellman_apply(m, pi, dense), atol=1e-10)
    assert expected_under_policy(cps[0], pi, 0) == pytest.approx(
        expected_under_policy(dense[0], pi, 0), abs=1e-12)


def test_exact_is_fixed_point():
    for seed in range(5):
        m, pi = instance(seed, S=3, n=2, U=3)
        q = policy_evaluate_exact(m, pi)
        np.testing.assert_allclose(bellman_apply(m, pi, q), q, atol=1e-8)


def test_exact_matches_joint_linear_system():
    # the |S||U|^n system solved directly
    m, pi = instance(5, S=2, n=2, U=2)
    S, J = 2, 4
    joints = list(itertools.product(range(2), repeat=2))
    big = np.zeros((S * J, S * J))
    for s, (a, u) in itertools.product(range(S), enumerate(joints)):
        for s2, (b, u2) in itertools.product(range(S), enumerate(joints)):
            big[s * J + a, s2 * J + b] = m.transition[(s, s2) + u] * pi.joint(s2)[u2]
    r = m.reward.reshape(-1)
    q = np.linalg.solve(np.eye(S * J) - m.gamma * big, r).reshape(m.reward.shape)
    np.testing.assert_allclose(policy_evaluate_exact(m, pi), q, atol=1e-10)


def test_iterative_converges_and_respects_bound():
    m, pi = instance(6, S=3, n=2, U=3)
    exact = policy_evaluate_exact(m, pi)
    tol = 1e-9
    q, iters = policy_evaluate_iterative(m, pi, 10000, tol)
    assert np.max(np.abs(q - exact)) <= 10 * tol / (1 - m.gamma)
    for t in (1, 5, 20):
        qt, _ = policy_evaluate_iterative(m, pi, t, 0.0)
        bound = m.gamma ** t * np.max(np.abs(exact)) / (1 - m.gamma)
        assert np.max(np.abs(qt - exact)) <= bound + 1e-12
    with pytest.raises(ValueError):
        policy_evaluate_iterative(m, pi, 0, tol)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.floats(0.0, 0.99))
def test_contraction(seed, S, n, U, gamma):
    m = generate_low_rank_mmdp(S, n, U, 1, 2, gamma, seed)
    rng = np.random.default_rng(seed)
    pi = FactoredPolicy.random(S, n, U, rng)
    q1, q2 = rng.standard_normal((2, S) + (U,) * n)
    lhs = np.max(np.abs(bellman_apply(m, pi, q1) - bellman_apply(m, pi, q2)))
    assert lhs <= gamma * np.max(np.abs(q1 - q2)) + 1e-10


def test_improve_examples():
    q = np.zeros((1, 3, 3))
    q[0, 2, 1] = 1.0
    pi = improve_policy(q, "greedy", eps=0.0)
    np.testing.assert_array_equal(pi.probs[0], [[0, 0, 1], [0, 1, 0]])
    uni = improve_policy(np.full((2, 4, 4), 3.0), "softmax", temperature=0.3)
    np.testing.assert_allclose(uni.probs, 0.25)
    eps = improve_policy(np.random.default_rng(0).random((1, 4, 4)), "greedy", eps=0.2)
    assert np.sort(eps.probs[0], axis=1)[:, -1] == pytest.approx([0.85, 0.85])
    tie = improve_policy(np.ones((1, 2, 2)), "greedy")
    np.testing.assert_array_equal(tie.probs[0], [[1, 0], [1, 0]])
    with pytest.raises(ValueError):
        improve_policy(q, "bogus")
    with pytest.raises(ValueError):
        improve_policy(q, "greedy", eps=1.5)
    with pytest.raises(ValueError):
        improve_policy(q, "softmax", temperature=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_improvement_never_worse(seed):
    m, pi = instance(seed, S=3, n=2, U=3)
    v_old = state_value_exact(m, pi)
    new = improve_policy(policy_evaluate_exact(m, pi), "greedy", 0.0)
    assert np.all(state_value_exact(m, new) >= v_old - 1e-8)


def test_policy_iteration_reaches_optimum():
    m, _ = instance(7, S=2, n=2, U=2)
    best, history = policy_iteration(m)
    # brute force over all deterministic joint policies
    per_state = list(itertools.product(itertools.product(range(2), repeat=2), repeat=2))
    values = [mean_return(m, FactoredPolicy.deterministic(np.array(a), 2)) for a in per_state]
    assert mean_return(m, best) == pytest.approx(max(values), abs=1e-10)
    assert len(history) >= 1


def test_exact_value_matches_monte_carlo():
    m, pi = instance(8, S=2, n=2, U=2, gamma=0.5)
    rng = np.random.default_rng(9)
    L = 25  # gamma^L < 1e-6
    disc = m.gamma ** np.arange(L)
    returns = np.array([disc @ rollout(m, pi, L, rng, start=0).rewards for _ in range(20000)])
    v = state_value_exact(m, pi)[0]
    sigma = returns.std() / np.sqrt(len(returns))
    assert abs(returns.mean() - v) <= 3 * sigma


def test_rank_bound_gamma_zero():
    m = generate_low_rank_mmdp(2, 3, 3, 2, 2, 0.0, seed=10)
    pi = FactoredPolicy.uniform(2, 3, 3)
    q = policy_evaluate_exact(m, pi)
    for s in range(2):
        cfg = AlsConfig(rank=2, restarts=5, max_sweeps=5000, tol=1e-12)
        assert als_decompose(q[s], cfg)[1] < 1e-6


def test_rank_bound_example():
    m = generate_low_rank_mmdp(2, 3, 4, 1, 1, 0.9, seed=11, transitions="mixture")
    pi = FactoredPolicy.random(2, 3, 4, np.random.default_rng(11))
    rep = verify_rank_bound(m, pi, 1e-4)
    assert rep.bound == 3 and rep.passed
    assert rep.rank_inflated == [False, False]
    inflated = generate_low_rank_mmdp(2, 2, 2, 1, 2, 0.9, seed=1, transitions="normalize")
    rep = verify_rank_bound(inflated, FactoredPolicy.uniform(2, 2, 2), 1e-4)
    assert rep.rank_inflated == [True, True]
