"""Autodiff engine: forward semantics, exact reverse-mode gradients against
central finite differences, and graph bookkeeping."""

import numpy as np
import pytest

from chunkmt import autodiff as ad
from chunkmt import verification as vf


def leaf64(x):
    return ad.leaf(np.asarray(x, dtype=np.float64))


class TestForward:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        out = ad.matmul(leaf64(np.eye(3)), leaf64(a))
        np.testing.assert_array_equal(out.value, a)

    def test_softmax_symmetry(self):
        out = ad.softmax(leaf64([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.value, [1 / 3] * 3, atol=1e-15)

    def test_sigmoid_at_zero(self):
        out = ad.sigmoid(leaf64(np.zeros((2, 2))))
        np.testing.assert_allclose(out.value, 0.5)

    def test_softmax_rows_are_distributions(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.standard_normal((4, 6)) * rng.uniform(0.1, 50)
            out = ad.softmax(leaf64(x)).value
            assert (out >= 0).all()
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(2)
        parts = [rng.standard_normal(n) for n in (3, 1, 4)]
        joined = ad.concat([leaf64(p) for p in parts])
        offsets = np.cumsum([0, 3, 1, 4])
        for k, p in enumerate(parts):
            piece = ad.slice_(joined, int(offsets[k]), int(offsets[k + 1]))
            np.testing.assert_array_equal(piece.value, p)

    def test_ops_preserve_dtype(self):
        x32 = ad.leaf(np.ones(3, dtype=np.float32))
        assert ad.tanh(x32).value.dtype == np.float32
        assert ad.tanh(leaf64(np.ones(3))).value.dtype == np.float64

    def test_forward_values_finite(self):
        rng = np.random.default_rng(3)
        x = leaf64(rng.standard_normal(8) * 100)
        for op in (ad.sigmoid, ad.tanh, ad.softmax):
            assert np.isfinite(op(x).value).all()


class TestShapeErrors:
    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(leaf64(np.ones((2, 3))), leaf64(np.ones((2, 3))))

    def test_add_mismatch(self):
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(leaf64(np.ones(3)), leaf64(np.ones(4)))

    def test_mul_mismatch(self):
        with pytest.raises(ad.ShapeError, match="mul"):
            ad.mul(leaf64(np.ones(3)), leaf64(np.ones((3, 1))))

    def test_slice_out_of_range(self):
        with pytest.raises(ad.ShapeError, match="slice"):
            ad.slice_(leaf64(np.ones(3)), 1, 5)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(leaf64(np.zeros(4)), 4)

    def test_embedding_index_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_lookup(leaf64(np.zeros((3, 2))), [0, 3])


class TestApply:
    def test_dispatch_matches_direct_call(self):
        a, b = leaf64(np.ones((2, 3))), leaf64(np.ones((3, 2)))
        np.testing.assert_array_equal(
            ad.apply("matmul", [a, b]).value, ad.matmul(a, b).value
        )

    def test_kwarg_ops(self):
        logits = leaf64([0.0, 1.0, 2.0])
        out = ad.apply("cross_entropy", [logits], target=1)
        np.testing.assert_allclose(out.value, ad.cross_entropy(logits, 1).value)
        table = leaf64(np.arange(6.0).reshape(3, 2))
        out = ad.apply("embedding_lookup", [table], indices=[2, 0])
        np.testing.assert_array_equal(out.value, [[4.0, 5.0], [0.0, 1.0]])

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown op kind"):
            ad.apply("conv2d", [])


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf64(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sigmoid_derivative_at_zero(self):
        w = leaf64([0.0])
        ad.backward(ad.sum_all(ad.sigmoid(w)))
        np.testing.assert_allclose(w.grad, [0.25], atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(leaf64(np.ones(3)))

    def test_gradients_accumulate_across_calls(self):
        x = leaf64([1.0, 2.0])
        loss = ad.sum_all(ad.mul(x, x))
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first)
        ad.zero_grads([x])
        assert x.grad is None

    def test_shared_node_gradients_sum(self):
        # x used twice: d/dx (x + x) = 2
        x = leaf64([3.0])
        ad.backward(ad.sum_all(ad.add(x, x)))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_two_layer_tanh_network_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        w2 = rng.standard_normal((4, 3))
        w_out = rng.standard_normal(3)
        x0 = rng.standard_normal((5, 4))

        def f(w1):
            h1 = ad.tanh(ad.matmul(ad.leaf(x0), w1))
            h2 = ad.tanh(ad.matmul(h1, ad.leaf(w2)))
            return ad.sum_all(ad.mul(h2, ad.leaf(np.tile(w_out, (5, 1)))))

        assert ad.grad_check(f, rng.standard_normal((4, 4))) < 1e-4

    def test_backward_is_deterministic(self):
        def run():
            rng = np.random.default_rng(42)
            x = leaf64(rng.standard_normal((3, 3)))
            y = leaf64(rng.standard_normal((3, 3)))
            loss = ad.sum_all(ad.softmax(ad.matmul(ad.tanh(x), y)))
            ad.backward(loss)
            return loss.value.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert (v1 == v2).all() and (g1 == g2).all()  # bitwise


class TestGradCheck:
    def test_sum_of_squares(self):
        point = np.array([1.0, 2.0, 3.0])

        def f(x):
            return ad.sum_all(ad.mul(x, x))

        assert ad.grad_check(f, point) < 1e-6
        x = leaf64(point)
        ad.backward(f(x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_constant_function(self):
        def f(x):
            return ad.sum_all(ad.leaf([1.0]))

        assert ad.grad_check(f, np.array([1.0, -2.0])) < 1e-8

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            ad.grad_check(lambda x: ad.sum_all(x), np.ones(2, dtype=np.float32))

    def test_requires_scalar_output(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.grad_check(lambda x: x, np.ones(3))


@pytest.mark.parametrize("kind", vf.OP_KINDS)
def test_every_op_kind_gradient(kind):
    """Analytic gradients match central differences for every op kind."""
    rng = np.random.default_rng(hash(kind) % (1 << 32))
    worst = max(vf._check_op_kind(kind, rng) for _ in range(3))
    assert worst < 1e-4
