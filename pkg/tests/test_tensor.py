"""Core tensor ops: forward oracles, backward rules, graph behavior."""

import numpy as np
import pytest

from conftest import grad_check, max_rel_err

from ofoh import tensor as T
from ofoh.errors import ContractError, ShapeError
from ofoh.tensor import Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_zero_annihilation(self):
        z = Tensor(np.zeros((2, 3)))
        b = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(T.matmul(z, b).data, np.zeros((2, 2)))

    def test_triple_loop_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for t in range(2):
                    expected[i, j] += a[i, t] * b[t, j]
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data,
                                      expected)
        np.testing.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        r = rng.normal(size=(3, 2))
        err = grad_check(
            lambda ta, tb: T.sum_all(T.matmul(ta, tb) * Tensor(r)), [a, b])
        assert err <= 1e-4


class TestConv2d:
    def test_1x1_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.random((4, 4, 1))
        k = np.ones((1, 1, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(k)).data
        np.testing.assert_array_equal(out, x)

    def test_zero_kernels(self):
        x = Tensor(np.random.default_rng(2).random((5, 4, 2)))
        k = Tensor(np.zeros((3, 3, 2, 3)))
        out = T.conv2d(x, k, stride=1, pad=1).data
        np.testing.assert_array_equal(out, np.zeros((5, 4, 3)))

    def test_hand_convolution(self):
        x = Tensor(np.ones((3, 3, 1)))
        k = Tensor(np.ones((2, 2, 1, 1)))
        out = T.conv2d(x, k).data
        np.testing.assert_array_equal(out, np.full((2, 2, 1), 4.0))

    def test_output_dims(self):
        x = Tensor(np.zeros((64, 32, 3)))
        k = Tensor(np.zeros((3, 3, 3, 8)))
        assert T.conv2d(x, k, stride=2, pad=1).shape == (32, 16, 8)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((5, 5, 1, 1))))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 2))
        r = rng.normal(size=(2, 2, 2))
        err = grad_check(
            lambda tx, tk: T.sum_all(T.conv2d(tx, tk, stride=1, pad=0)
                                     * Tensor(r)), [x, k])
        assert err <= 1e-4


class TestGlobalAvgPool:
    def test_constant_map(self):
        x = Tensor(np.full((3, 5, 2), 0.7))
        np.testing.assert_allclose(T.global_avg_pool(x).data, [0.7, 0.7])

    def test_arithmetic_mean(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1))
        np.testing.assert_array_equal(T.global_avg_pool(x).data, [2.5])

    def test_single_pixel(self):
        x = Tensor(np.array([[[3.0, -1.0, 2.0]]]))
        np.testing.assert_array_equal(T.global_avg_pool(x).data,
                                      [3.0, -1.0, 2.0])

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 4))
        r = rng.normal(size=4)
        err = grad_check(
            lambda tx: T.sum_all(T.global_avg_pool(tx) * Tensor(r)), [x])
        assert err <= 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(5).normal(size=(3, 4)),
                   requires_grad=True)
        T.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_half_square_norm_gives_w(self):
        w = Tensor(np.random.default_rng(6).normal(size=7), requires_grad=True)
        (T.sum_all(w * w) * 0.5).backward()
        np.testing.assert_allclose(w.grad, w.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_unreachable_param_gets_zero_grad(self):
        w = Tensor(np.ones(3), requires_grad=True)
        orphan = Tensor(np.ones(2), requires_grad=True)
        T.sum_all(w).backward(params=[w, orphan])
        np.testing.assert_array_equal(orphan.grad, np.zeros(2))

    def test_chain_rule_composition(self):
        # gradient of a 3-op composite vs FD of the composite
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 3))

        def composite(tx):
            return T.sum_all(T.relu(T.matmul(tx, tx)) * 0.5)

        assert grad_check(composite, [x]) <= 1e-4

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            x = Tensor(rng.normal(size=(4, 4)))
            loss = T.mean_all(T.gelu(T.matmul(w, x)))
            loss.backward()
            return loss.item(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestElementwiseAndShape:
    def test_add_broadcast_bias(self):
        x = np.random.default_rng(8).normal(size=(3, 4))
        b = np.random.default_rng(9).normal(size=4)
        err = grad_check(lambda tx, tb: T.sum_all((tx + tb) * (tx + tb)),
                         [x, b])
        assert err <= 1e-4

    def test_div_gradients(self):
        rng = np.random.default_rng(10)
        a = rng.normal(size=(2, 3))
        b = rng.uniform(1.0, 2.0, size=(2, 3))
        err = grad_check(lambda ta, tb: T.sum_all(T.div(ta, tb)), [a, b])
        assert err <= 1e-4

    def test_concat_narrow_roundtrip(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        cat = T.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        back = T.narrow(cat, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a.data)
        T.sum_all(T.narrow(cat, 1, 3, 2)).backward()
        np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 2)))

    def test_narrow_bounds(self):
        with pytest.raises(ShapeError):
            T.narrow(Tensor(np.zeros((2, 2))), 1, 1, 5)

    def test_unary_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0.3, 2.0, size=(2, 4))
        for op in (T.exp, T.log, T.sqrt, T.gelu, T.relu):
            err = grad_check(lambda tx: T.sum_all(op(tx)), [x])
            assert err <= 1e-4, op.__name__

    def test_arccos_gradients_interior(self):
        x = np.random.default_rng(12).uniform(-0.9, 0.9, size=(3, 3))
        assert grad_check(lambda tx: T.sum_all(T.arccos(tx)), [x]) <= 1e-4

    def test_arccos_endpoints(self):
        t = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        out = T.arccos(t)
        np.testing.assert_allclose(out.data, [0.0, np.pi])
        T.sum_all(out).backward()
        np.testing.assert_array_equal(t.grad, [0.0, 0.0])

    def test_clamp_min(self):
        t = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
        out = T.clamp_min(t, 0.5)
        np.testing.assert_array_equal(out.data, [0.5, 0.5, 2.0])
        T.sum_all(out).backward()
        np.testing.assert_array_equal(t.grad, [0.0, 1.0, 1.0])


class TestRowOps:
    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 5))
        gamma = rng.uniform(0.5, 1.5, size=5)
        beta = rng.normal(size=5)
        r = rng.normal(size=(3, 5))
        err = grad_check(
            lambda tx, tg, tb: T.sum_all(
                T.layer_norm_rows(tx, tg, tb) * Tensor(r)),
            [x, gamma, beta])
        assert err <= 1e-4

    def test_layer_norm_normalizes(self):
        x = Tensor(np.random.default_rng(14).normal(2.0, 3.0, size=(4, 8)))
        out = T.layer_norm_rows(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=1), 1.0, atol=1e-3)

    def test_l2_normalize_rows(self):
        x = Tensor(np.random.default_rng(15).normal(size=(3, 4)))
        out = T.l2_normalize_rows(x)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0,
                                   rtol=1e-12)
        err = grad_check(
            lambda tx: T.sum_all(T.l2_normalize_rows(tx)
                                 * Tensor(np.ones((3, 4)))),
            [x.data.copy()])
        assert err <= 1e-4

    def test_reduce_min_rows(self):
        x = Tensor(np.array([[3.0, 1.0, 2.0], [0.5, 0.5, 4.0]]),
                   requires_grad=True)
        out = T.reduce_min_rows(x)
        np.testing.assert_array_equal(out.data, [1.0, 0.5])
        T.sum_all(out).backward()
        expected = np.zeros((2, 3))
        expected[0, 1] = 1.0
        expected[1, 0] = 1.0   # tie routed to the first argmin
        np.testing.assert_array_equal(x.grad, expected)

    def test_softmax_gradients(self):
        x = np.random.default_rng(16).normal(size=(2, 5))
        r = np.random.default_rng(17).normal(size=(2, 5))
        err = grad_check(
            lambda tx: T.sum_all(T.softmax_rows(tx) * Tensor(r)), [x])
        assert err <= 1e-4


class TestMaskedPartMeans:
    def test_full_coverage_single_part(self):
        rng = np.random.default_rng(18)
        fmap = Tensor(rng.normal(size=(4, 3, 2)))
        mask = np.ones((4, 3), dtype=np.int64)
        out = T.masked_part_means(fmap, mask, 4)
        np.testing.assert_allclose(out.data[0], fmap.data.mean(axis=(0, 1)))
        np.testing.assert_array_equal(out.data[1:], np.zeros((3, 2)))

    def test_two_pixel_mean(self):
        fmap = np.zeros((2, 2, 1))
        fmap[0, 0, 0] = 1.0
        fmap[0, 1, 0] = 3.0
        mask = np.zeros((2, 2), dtype=np.int64)
        mask[0, :] = 2
        out = T.masked_part_means(Tensor(fmap), mask, 4)
        np.testing.assert_array_equal(out.data[1], [2.0])

    def test_gradients(self):
        rng = np.random.default_rng(19)
        fmap = rng.normal(size=(4, 4, 3))
        mask = rng.integers(0, 4, size=(4, 4))
        r = rng.normal(size=(3, 3))
        err = grad_check(
            lambda tf: T.sum_all(T.masked_part_means(tf, mask, 3) * Tensor(r)),
            [fmap])
        assert err <= 1e-4
