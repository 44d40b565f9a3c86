import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semgcnn.nn import (
    BatchNorm,
    Dropout,
    Linear,
    ReLU,
    ShapeError,
    conv1d_backward,
    conv1d_forward,
    cross_entropy,
    locally_connected_forward,
    log_softmax,
    softmax,
)
from semgcnn.nn.layers import LayerStateError

from oracles import bn_oracle, ce_oracle, conv_oracle, lc_oracle



class TestConv1d:
    def test_matches_triple_loop_200_cases(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n, c, m = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
            r = rng.integers(1, 5)
            h = rng.integers(r, r + 8)
            x = rng.standard_normal((n, c, h))
            w = rng.standard_normal((m, c, r))
            b = rng.standard_normal(m)
            np.testing.assert_allclose(conv1d_forward(x, w, b), conv_oracle(x, w, b), rtol=0, atol=1e-12)

    def test_output_extent(self):
        x = np.zeros((2, 4, 75))
        assert conv1d_forward(x, np.zeros((64, 4, 3)), np.zeros(64)).shape == (2, 64, 73)

    def test_backward_matches_adjoint(self):
        # <conv(x), g> is linear in x and w, so its gradients are exact adjoints
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 2, 9))
        w = rng.standard_normal((4, 2, 3))
        g = rng.standard_normal((3, 4, 7))
        gx, gw, gb = conv1d_backward(g, x, w)
        zero_b = np.zeros(4)
        for arr, grad, f in [(x, gx, lambda a: conv1d_forward(a, w, zero_b)),
                             (w, gw, lambda a: conv1d_forward(x, a, zero_b))]:
            for idx in [(0, 0, 0), (1, 1, 2), (2, 0, 1)]:
                e = np.zeros_like(arr)
                e[idx] = 1.0
                assert np.sum(f(e) * g) == pytest.approx(grad[idx], abs=1e-12)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 2)))

    @pytest.mark.parametrize("x_shape,w_shape,b_shape", [
        ((2, 3, 10), (4, 2, 3), (4,)),
        ((2, 3, 2), (4, 3, 3), (4,)),
        ((2, 3, 10), (4, 3, 3), (5,)),
        ((3, 10), (4, 3, 3), (4,)),
    ])
    def test_shape_errors(self, x_shape, w_shape, b_shape):
        with pytest.raises(ShapeError):
            conv1d_forward(np.zeros(x_shape), np.zeros(w_shape), np.zeros(b_shape))


class TestLocallyConnected:
    def test_matches_per_position_matmul_200_cases(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n, c, m, length = (int(v) for v in rng.integers(1, 6, size=4))
            x = rng.standard_normal((n, c, length))
            w = rng.standard_normal((length, m, c))
            b = rng.standard_normal((length, m))
            np.testing.assert_allclose(locally_connected_forward(x, w, b), lc_oracle(x, w, b), rtol=0, atol=1e-12)

    def test_no_weight_sharing(self):
        # changing the kernel of one position leaves every other position unchanged
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5))
        w = rng.standard_normal((5, 4, 3))
        b = np.zeros((5, 4))
        y0 = locally_connected_forward(x, w, b)
        w[2] += 1.0
        y1 = locally_connected_forward(x, w, b)
        changed = np.any(y0 != y1, axis=(0, 1))
        assert changed.tolist() == [False, False, True, False, False]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="length"):
            locally_connected_forward(np.zeros((1, 3, 6)), np.zeros((5, 4, 3)), np.zeros((5, 4)))


class TestCrossEntropy:
    def test_matches_direct_formula_200_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n, k = rng.integers(1, 6), rng.integers(2, 8)
            z = rng.standard_normal((n, k)) * 3
            y = rng.integers(0, k, n)
            loss, _ = cross_entropy(z, y)
            assert abs(loss - ce_oracle(z, y)) <= 1e-12

    def test_uniform_logits_give_ln6(self):
        loss, _ = cross_entropy(np.zeros((5, 6)), np.arange(5))
        assert abs(loss - math.log(6)) < 1e-9

    def test_confident_correct_is_tiny(self):
        z = np.zeros((3, 6))
        y = np.array([0, 3, 5])
        z[np.arange(3), y] = 100.0
        loss, _ = cross_entropy(z, y)
        assert loss < 1e-20

    def test_huge_logits_are_stable(self):
        z = np.array([[1e4, 0.0, -1e4]])
        loss, g = cross_entropy(z, np.array([2]))
        assert loss == pytest.approx(2e4)
        assert np.all(np.isfinite(g))

    def test_gradient_is_softmax_minus_onehot_over_n(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((4, 6))
        y = np.array([1, 0, 5, 2])
        _, g = cross_entropy(z, y)
        expected = softmax(z)
        expected[np.arange(4), y] -= 1
        np.testing.assert_allclose(g, expected / 4, atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            cross_entropy(np.zeros((2, 6)), np.array([0, 6]))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_log_softmax_normalized(self, row):
        z = np.array([row])
        assert np.exp(log_softmax(z)).sum() == pytest.approx(1.0, abs=1e-12)


class TestBatchNorm:
    def test_matches_direct_formula_200_cases(self):
        rng = np.random.default_rng(5)
        for i in range(200):
            c = int(rng.integers(1, 6))
            shape = (int(rng.integers(2, 6)), c) if i % 2 else (int(rng.integers(1, 5)), c, int(rng.integers(2, 6)))
            x = rng.standard_normal(shape) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
            bn = BatchNorm(c, eps=1e-5)
            bn.params["gamma"].value = rng.standard_normal(c)
            bn.params["beta"].value = rng.standard_normal(c)
            out = bn.forward(x, train=True)
            ref = bn_oracle(x, bn.params["gamma"].value, bn.params["beta"].value, 1e-5)
            np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_running_stats_use_unbiased_variance(self):
        x = np.array([[1.0], [2.0], [4.0]])
        bn = BatchNorm(1, momentum=0.1)
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.1 * 7 / 3)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 1.0]
        bn.num_batches_tracked = 1
        out = bn.forward(np.array([[3.0, 0.0]]), train=False)
        np.testing.assert_allclose(out, [[2 / np.sqrt(4 + 1e-5), 1 / np.sqrt(1 + 1e-5)]])

    def test_eval_before_training_is_an_error(self):
        with pytest.raises(LayerStateError):
            BatchNorm(3).forward(np.zeros((2, 3)), train=False)

    def test_single_value_per_channel_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            BatchNorm(3).forward(np.zeros((1, 3)), train=True)


class TestReLUAndDropout:
    def test_relu_forward_backward(self):
        layer = ReLU()
        x = np.array([[-1.0, 0.0, 2.0]])
        np.testing.assert_array_equal(layer.forward(x, train=True), [[0, 0, 2]])
        np.testing.assert_array_equal(layer.backward(np.ones((1, 3))), [[0, 0, 1]])

    def test_relu_keeps_dtype(self):
        assert ReLU().forward(np.ones((2, 2), dtype=np.float32)).dtype == np.float32

    def test_backward_before_forward(self):
        with pytest.raises(LayerStateError, match="before forward"):
            Linear(3, 2, np.random.default_rng(0)).backward(np.zeros((1, 2)))

    def test_dropout_identity_in_eval(self):
        x = np.arange(6.0).reshape(2, 3)
        d = Dropout(0.5, rng=np.random.default_rng(0))
        assert d.forward(x, train=False) is x
        np.testing.assert_array_equal(d.backward(np.ones((2, 3))), np.ones((2, 3)))

    def test_dropout_preserves_expectation(self):
        d = Dropout(0.5, rng=np.random.default_rng(0))
        x = np.ones((400, 500))
        out = d.forward(x, train=True)
        # mean of 200000 Bernoulli(0.5) * 2 variables: sd of the mean ~ 0.0022
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_dropout_gradient_uses_same_mask(self):
        d = Dropout(0.5, rng=np.random.default_rng(1))
        out = d.forward(np.ones((3, 4)), train=True)
        np.testing.assert_array_equal(d.backward(np.ones((3, 4))), out)

    def test_dropout_probability_validated(self):
        with pytest.raises(ValueError):
            Dropout(1.0)
