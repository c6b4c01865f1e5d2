import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from read_forge import tensor as T
from read_forge.errors import (
    ConfigError,
    DimensionError,
    EvaluationError,
    LineageError,
    ShapeError,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _grad(loss_fn, *params):
    tape = T.Tape()
    with tape:
        loss = loss_fn()
    return T.backward(tape, loss)


class TestMatmul:
    def test_identity(self):
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(2)), a).data, a.data)

    def test_hand_product(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_zeros(self):
        out = T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.arange(12.0).reshape(3, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 2))))


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(T.softmax_rows(T.Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out >= 0)


class TestLayerNorm:
    def test_constant_row_gives_zero(self):
        out = T.layer_norm(T.Tensor([[3.0, 3.0, 3.0]]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_unit_row(self):
        out = T.layer_norm(T.Tensor([[1.0, -1.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))
        expected = 1.0 / math.sqrt(1.0 + T.LN_EPS)  # variance 1, mean 0
        np.testing.assert_allclose(out.data, [[expected, -expected]], rtol=1e-15)

    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
    def test_bias_shifts_output(self, x, b):
        g = T.Tensor(np.ones(4))
        base = T.layer_norm(T.Tensor(x), g, T.Tensor(np.zeros(4))).data
        shifted = T.layer_norm(T.Tensor(x), g, T.Tensor(b)).data
        np.testing.assert_allclose(shifted - base, np.broadcast_to(b, base.shape), atol=1e-9)

    def test_width_one_rejected(self):
        with pytest.raises(DimensionError):
            T.layer_norm(T.Tensor([[1.0]]), T.Tensor([1.0]), T.Tensor([0.0]))


class TestActivations:
    def test_values(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == 0.5
        assert T.relu(T.Tensor(-3.0)).item() == 0.0
        # tanh(1) from its exponential definition
        e2 = math.fsum(2.0 ** k / math.factorial(k) for k in range(40))
        assert T.tanh(T.Tensor(1.0)).item() == pytest.approx((e2 - 1) / (e2 + 1), abs=1e-15)
        assert T.tanh(T.Tensor(1.0)).item() == pytest.approx(0.7615941559557649, abs=1e-15)

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            T.apply_unary(T.Tensor(1.0), "gelu")


class TestBackward:
    def test_linear_sum_gradient(self):
        W = T.parameter(np.arange(6.0).reshape(2, 3), name="W")
        x = T.Tensor([[1.0], [2.0], [3.0]])
        grads = _grad(lambda: (W @ x).sum())
        np.testing.assert_array_equal(grads[W], np.ones((2, 1)) @ x.data.T)

    def test_quadratic(self):
        W = T.parameter(np.array([[1.5, -2.0], [0.25, 4.0]]))
        grads = _grad(lambda: (W * W).sum() * 0.5)
        np.testing.assert_array_equal(grads[W], W.data)

    def test_unused_parameter_absent(self):
        W = T.parameter(np.ones(3))
        V = T.parameter(np.ones(3))
        grads = _grad(lambda: (W * W).sum())
        assert W in grads and V not in grads

    def test_non_scalar_loss(self):
        W = T.parameter(np.ones(3))
        tape = T.Tape()
        with tape:
            out = W * W
        with pytest.raises(ShapeError):
            T.backward(tape, out)

    def test_loss_from_other_tape(self):
        W = T.parameter(np.ones(3))
        tape, other = T.Tape(), T.Tape()
        with tape:
            loss = (W * W).sum()
        with pytest.raises(LineageError):
            T.backward(other, loss)

    def test_tape_consumed_once(self):
        W = T.parameter(np.ones(3))
        tape = T.Tape()
        with tape:
            loss = (W * W).sum()
        T.backward(tape, loss)
        with pytest.raises(LineageError):
            T.backward(tape, loss)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
    def test_broadcast_add_gradient_sums(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        a = T.parameter(rng.standard_normal((rows, cols)))
        b = T.parameter(rng.standard_normal(cols))
        grads = _grad(lambda: (a + b).sum())
        np.testing.assert_array_equal(grads[b], np.full(cols, float(rows)))


class TestTapeAccounting:
    def test_frozen_records_nothing(self):
        W = T.parameter(np.ones((3, 3)))
        tape = T.Tape()
        with tape, T.frozen():
            (W @ W).sum()
        assert tape.saved_bytes == 0 and not tape.nodes

    def test_parameters_not_charged(self):
        W = T.parameter(np.ones((4, 4)))
        x = T.Tensor(np.ones((2, 4)))
        tape = T.Tape()
        with tape:
            W @ x.T
        # matmul saves the constant x for W's gradient; W itself is persistent
        assert tape.saved_bytes == x.nbytes

    def test_shared_array_charged_once(self):
        W = T.parameter(np.ones((3,)))
        tape = T.Tape()
        with tape:
            y = T.tanh(W)
            y * y
        # tanh keeps its output, and mul keeps that same array for both factors
        assert tape.saved_bytes == y.nbytes

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(3)
            W = T.parameter(rng.standard_normal((5, 4)))
            x = T.Tensor(rng.standard_normal((2, 5)))
            tape = T.Tape()
            with tape:
                loss = T.tanh(x @ W).sum()
            saved = tape.saved_bytes
            return saved, T.backward(tape, loss)[W]

        (s1, g1), (s2, g2) = run(), run()
        assert s1 == s2
        assert np.array_equal(g1, g2)


class TestFiniteDifference:
    def test_quadratic_is_exact(self):
        p = T.parameter(np.array(3.0))
        g = T.finite_difference_gradient(lambda: (p * p), p, h=1e-5)
        assert g.item() == pytest.approx(6.0, abs=1e-9)

    def test_constant(self):
        p = T.parameter(np.ones(4))
        np.testing.assert_array_equal(T.finite_difference_gradient(lambda: 2.0, p), np.zeros(4))

    def test_non_finite(self):
        p = T.parameter(np.ones(2))
        with pytest.raises(EvaluationError):
            T.finite_difference_gradient(lambda: float("nan"), p)

    def test_restores_data(self):
        p = T.parameter(np.arange(3.0))
        before = p.data
        T.finite_difference_gradient(lambda: (p * p).sum(), p)
        assert p.data is before
        np.testing.assert_array_equal(before, np.arange(3.0))


class TestFusedGates:
    def test_gru_matches_unfused(self):
        rng = np.random.default_rng(0)
        h = 3
        gi, gh, hp = rng.standard_normal((2, 3 * h)), rng.standard_normal((2, 3 * h)), rng.standard_normal((2, h))
        sig = lambda x: 1 / (1 + np.exp(-x))
        r = sig(gi[:, :h] + gh[:, :h])
        z = sig(gi[:, h:2 * h] + gh[:, h:2 * h])
        n = np.tanh(gi[:, 2 * h:] + r * gh[:, 2 * h:])
        expected = (1 - z) * n + z * hp
        out = T.gru_gates(T.Tensor(gi), T.Tensor(gh), T.Tensor(hp)).data
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_lstm_matches_unfused(self):
        rng = np.random.default_rng(1)
        h = 2
        gates, c_prev = rng.standard_normal((3, 4 * h)), rng.standard_normal((3, h))
        sig = lambda x: 1 / (1 + np.exp(-x))
        i, f, g, o = (gates[:, k * h:(k + 1) * h] for k in range(4))
        c = sig(f) * c_prev + sig(i) * np.tanh(g)
        out = T.lstm_gates(T.Tensor(gates), T.Tensor(c_prev)).data
        np.testing.assert_allclose(out, np.concatenate([sig(o) * np.tanh(c), c], axis=-1), rtol=1e-14)

    def test_bad_width(self):
        with pytest.raises(DimensionError):
            T.gru_gates(T.Tensor(np.zeros((1, 5))), T.Tensor(np.zeros((1, 5))), T.Tensor(np.zeros((1, 2))))
