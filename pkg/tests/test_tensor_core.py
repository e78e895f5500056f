import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tesseract.tensor_core import (CpTensor, ShapeError, as_dense, contract, cp_inner_product,
                                   cp_reconstruct, frobenius_norm, outer_product, random_cp)


def test_outer_product_examples():
    np.testing.assert_array_equal(outer_product([[1, 0], [1, 0]]), [[1, 0], [0, 0]])
    np.testing.assert_array_equal(outer_product([[2], [3], [4]]), np.full((1, 1, 1), 24.0))
    # oracle: elementwise products
    v1, v2 = [1, 2], [3, 4]
    expected = np.array([[a * b for b in v2] for a in v1], dtype=float)
    np.testing.assert_array_equal(outer_product([v1, v2]), expected)


def test_outer_product_rejects_empty():
    with pytest.raises(ValueError):
        outer_product([])
    with pytest.raises(ValueError):
        outer_product([[1.0], []])


def test_as_dense_row_major():
    t = as_dense(range(6), shape=(2, 3))
    assert t[1, 0] == 3.0
    with pytest.raises(ShapeError):
        as_dense(range(5), shape=(2, 3))
    with pytest.raises(ValueError):
        as_dense([1.0, np.nan])


def test_contract_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
        np.testing.assert_allclose(contract(a, b, [(1, 0)]), a @ b, atol=1e-12)


def test_full_self_contraction_is_squared_norm():
    t = np.random.default_rng(1).standard_normal((3, 2, 4))
    full = contract(t, t, [(0, 0), (1, 1), (2, 2)])
    assert float(full) == pytest.approx(frobenius_norm(t) ** 2, rel=1e-12)


def test_contract_against_loops():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 2))
    got = contract(a, b, [(1, 2)])
    assert got.shape == (2, 2, 2, 2)
    for i, k, p, q in itertools.product(range(2), repeat=4):
        want = sum(a[i, e, k] * b[p, q, e] for e in range(2))
        assert got[i, k, p, q] == pytest.approx(want, abs=1e-12)


def test_contract_dim_mismatch():
    with pytest.raises(ShapeError):
        contract(np.ones((2, 3)), np.ones((2, 3)), [(1, 0)])


def test_contract_bilinear():
    rng = np.random.default_rng(3)
    a, b, c = (rng.standard_normal((3, 4)) for _ in range(3))
    alpha = 1.7
    lhs = contract(alpha * a + b, c, [(1, 1)])
    rhs = alpha * contract(a, c, [(1, 1)]) + contract(b, c, [(1, 1)])
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_cp_reconstruct_examples():
    t = CpTensor([1.0], [[[1.0], [0.0]], [[0.0], [1.0]]])
    np.testing.assert_array_equal(cp_reconstruct(t), [[0, 1], [0, 0]])
    rng = np.random.default_rng(4)
    two = random_cp((3, 4), 2, rng)
    zeroed = CpTensor([two.weights[0], 0.0], two.factors)
    first = CpTensor(two.weights[:1], [f[:, :1] for f in two.factors])
    np.testing.assert_allclose(cp_reconstruct(zeroed), cp_reconstruct(first), atol=1e-15)


def test_cp_reconstruct_against_summation():
    rng = np.random.default_rng(5)
    t = random_cp((3, 4, 2), 3, rng)
    dense = cp_reconstruct(t)
    for idx in itertools.product(*(range(d) for d in t.shape)):
        want = sum(t.weights[r] * np.prod([t.factors[j][idx[j], r] for j in range(3)])
                   for r in range(3))
        assert dense[idx] == pytest.approx(want, abs=1e-10)


def test_normalized_invariant_enforced():
    with pytest.raises(ValueError):
        CpTensor([1.0], [[[1.0], [1.0]]], normalized=True)
    raw = CpTensor([1.0], [[[1.0], [1.0]]], normalized=False)
    assert raw.normalize().weights[0] == pytest.approx(np.sqrt(2))
    with pytest.raises(ValueError):
        CpTensor([], [np.zeros((2, 0))])


def test_rescaling_invariance():
    rng = np.random.default_rng(6)
    t = random_cp((3, 3, 3), 2, rng)
    facs = [f.copy() for f in t.factors]
    facs[1][:, 0] *= 3.5
    w = t.weights.copy()
    w[0] /= 3.5
    again = CpTensor(w, facs, normalized=False).normalize()
    np.testing.assert_allclose(cp_reconstruct(again), cp_reconstruct(t), atol=1e-10)


def test_inner_product_examples():
    rng = np.random.default_rng(7)
    t = random_cp((5, 5, 5), 4, rng)
    dense = cp_reconstruct(t)
    onehots = [np.eye(5)[1], np.eye(5)[4], np.eye(5)[0]]
    assert cp_inner_product(t, onehots) == pytest.approx(dense[1, 4, 0], abs=1e-10)
    assert cp_inner_product(t, [onehots[0], np.zeros(5), onehots[2]]) == 0.0
    vecs = [rng.standard_normal(5) for _ in range(3)]
    naive = float(np.sum(dense * outer_product(vecs)))
    assert cp_inner_product(t, vecs) == pytest.approx(naive, abs=1e-10)
    with pytest.raises(ShapeError):
        cp_inner_product(t, [np.ones(4), np.ones(5), np.ones(5)])


def test_frobenius_examples():
    assert frobenius_norm(np.zeros((2, 2))) == 0.0
    assert frobenius_norm(np.eye(3)[0]) == 1.0
    assert frobenius_norm([[3, 4], [0, 0]]) == 5.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1), st.data())
def test_inner_product_indexes_reconstruction(order, rank, seed, data):
    rng = np.random.default_rng(seed)
    shape = [data.draw(st.integers(1, 4)) for _ in range(order)]
    t = random_cp(shape, rank, rng)
    idx = tuple(data.draw(st.integers(0, d - 1)) for d in shape)
    onehots = [np.eye(d)[i] for d, i in zip(shape, idx)]
    assert cp_inner_product(t, onehots) == pytest.approx(cp_reconstruct(t)[idx], abs=1e-10)
