"""Attention ops, with the brute-force simplex-projection oracle."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finite_difference, max_rel_err

from ofoh import tensor as T
from ofoh.attention import (attend, scaled_scores, softmax_rows, sparsemax,
                            sparsemax_backward, sparsemax_rows)
from ofoh.errors import ContractError
from ofoh.tensor import Tensor


def simplex_projection_oracle(z: np.ndarray) -> np.ndarray:
    """Exhaustive-support KKT solve: try every non-empty support, keep the
    feasible candidate minimizing ||p - z||^2."""
    k = len(z)
    best, best_val = None, np.inf
    for r in range(1, k + 1):
        for support in itertools.combinations(range(k), r):
            s = list(support)
            tau = (z[s].sum() - 1.0) / len(s)
            p = np.zeros(k)
            p[s] = z[s] - tau
            if np.any(p[s] < -1e-12):
                continue
            val = ((p - z) ** 2).sum()
            if val < best_val - 1e-15:
                best_val, best = val, p
    return best


class TestScaledScores:
    def test_identity_case(self):
        q = Tensor(np.eye(2))
        s = scaled_scores(q, q, 4)
        np.testing.assert_allclose(s.data, np.eye(2) / 2.0)

    def test_orthogonal_rows(self):
        q = Tensor(np.array([[1.0, 0.0]]))
        k = Tensor(np.array([[0.0, 1.0], [0.0, -2.0]]))
        np.testing.assert_array_equal(scaled_scores(q, k, 2).data,
                                      np.zeros((1, 2)))

    def test_zero_query(self):
        q = Tensor(np.zeros((2, 3)))
        k = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(scaled_scores(q, k, 3).data,
                                      np.zeros((2, 4)))

    def test_bad_dk(self):
        with pytest.raises(ContractError):
            scaled_scores(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), 0)


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = softmax_rows(Tensor(np.zeros((1, 2))))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_shift_invariance_to_uniform(self):
        out = softmax_rows(Tensor(np.full((1, 5), 3.7)))
        np.testing.assert_allclose(out.data, np.full((1, 5), 0.2))

    def test_closed_form_ratio(self):
        out = softmax_rows(Tensor(np.log([[1.0, 3.0]])))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], rtol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(ContractError):
            softmax_rows(Tensor(np.array([[np.nan, 0.0]])))


class TestSparsemax:
    def test_constant_vector(self):
        np.testing.assert_allclose(sparsemax(np.full(4, 2.0)), np.full(4, 0.25))

    def test_two_entry_saturation(self):
        np.testing.assert_allclose(sparsemax(np.array([3.0, 1.0])), [1.0, 0.0])

    def test_three_entry_partial_support(self):
        np.testing.assert_allclose(sparsemax(np.array([1.5, 1.0, 0.5])),
                                   [0.75, 0.25, 0.0])

    def test_nan_rejected(self):
        with pytest.raises(ContractError):
            sparsemax(np.array([np.nan, 1.0]))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(150):
            k = int(rng.integers(2, 9))
            z = rng.uniform(-3, 3, size=k)
            np.testing.assert_allclose(sparsemax(z),
                                       simplex_projection_oracle(z),
                                       atol=1e-6)

    @given(st.lists(st.integers(-8192, 8192), min_size=2, max_size=8),
           st.integers(-8192, 8192))
    @settings(max_examples=200, deadline=None)
    def test_simplex_and_shift_invariance(self, zi, ci):
        z = np.array(zi, dtype=np.float64) / 1024.0
        c = ci / 1024.0
        p = sparsemax(z)
        assert (p >= 0.0).all()
        assert abs(p.sum() - 1.0) <= 1e-9
        shifted = sparsemax(z + c)
        np.testing.assert_allclose(shifted, p, atol=1e-12)
        assert ((shifted > 0) == (p > 0)).all()

    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_order_preservation(self, zi):
        z = np.array(zi)
        p = sparsemax(z)
        order = np.argsort(-z, kind="stable")
        assert (np.diff(p[order]) <= 1e-12).all()

    def test_sparsity_monotone_in_scale(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            z = rng.normal(size=6)
            while len(np.unique(z)) < 6:
                z = rng.normal(size=6)
            sizes = [(sparsemax(t * z) > 0).sum()
                     for t in (1.0, 1.5, 2.0, 4.0, 8.0)]
            assert all(a >= b for a, b in zip(sizes, sizes[1:]))


class TestSparsemaxBackward:
    def test_constant_upstream_killed_on_full_support(self):
        z = np.array([0.1, 0.2, 0.15])   # small spread -> full support
        assert (sparsemax(z) > 0).all()
        g = sparsemax_backward(z, np.ones(3))
        np.testing.assert_allclose(g, np.zeros(3), atol=1e-15)

    def test_singleton_support(self):
        z = np.array([5.0, 0.0, 0.0])
        g = sparsemax_backward(z, np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        checked = 0
        while checked < 30:
            z = rng.uniform(-2, 2, size=5)
            p = sparsemax(z)
            tau_gap = np.abs(z - (z - p))   # |z_i - tau| = p_i on support
            margin = min(p[p > 0].min(), np.abs((z - p + 1e-300))[p == 0].min()
                         if (p == 0).any() else 1.0)
            # stay away from support boundaries
            support = p > 0
            tau = (z[support].sum() - 1.0) / support.sum()
            if np.abs(z - tau).min() < 1e-3:
                continue
            upstream = rng.normal(size=5)
            analytic = sparsemax_backward(z, upstream)
            numeric = finite_difference(
                lambda zz: float(sparsemax(zz) @ upstream), [z.copy()])[0]
            assert max_rel_err(analytic, numeric) <= 1e-4
            checked += 1

    def test_graph_op_matches_pure_function(self):
        rng = np.random.default_rng(22)
        z = rng.normal(size=(3, 6))
        upstream = rng.normal(size=(3, 6))
        t = Tensor(z, requires_grad=True)
        out = sparsemax_rows(t)
        T.sum_all(out * Tensor(upstream)).backward()
        expected = np.stack([sparsemax_backward(z[i], upstream[i])
                             for i in range(3)])
        np.testing.assert_allclose(t.grad, expected, atol=1e-12)


class TestAttend:
    def test_one_hot_selection(self):
        w = Tensor(np.array([[0.0, 1.0, 0.0]]))
        v = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(attend(w, v).data, [[2.0, 3.0]])

    def test_uniform_average(self):
        w = Tensor(np.full((1, 4), 0.25))
        v = Tensor(np.random.default_rng(23).normal(size=(4, 3)))
        np.testing.assert_allclose(attend(w, v).data[0], v.data.mean(axis=0))

    def test_hand_combination(self):
        w = Tensor(np.array([[0.75, 0.25, 0.0]]))
        v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]]))
        np.testing.assert_allclose(attend(w, v).data, [[0.75, 0.25]])

    def test_off_simplex_rejected(self):
        with pytest.raises(ContractError):
            attend(Tensor(np.array([[0.5, 0.2]])), Tensor(np.zeros((2, 2))))

    def test_textbook_attention_cross_check(self):
        rng = np.random.default_rng(24)
        q, k, v = (rng.normal(size=(4, 3)), rng.normal(size=(5, 3)),
                   rng.normal(size=(5, 2)))
        composed = attend(softmax_rows(scaled_scores(Tensor(q), Tensor(k), 3)),
                          Tensor(v)).data
        s = q @ k.T / np.sqrt(3.0)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        direct = (e / e.sum(axis=1, keepdims=True)) @ v
        np.testing.assert_allclose(composed, direct, rtol=1e-12)
