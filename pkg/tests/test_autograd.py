"""Backward-pass checks: every op against central differences, plus the
graph-consumption, accumulation, branch-trace and MAC-counting contracts."""

import numpy as np
import pytest

from s2aformer import tensor as T
from s2aformer.errors import DimensionError, GraphStateError, ParameterError
from s2aformer.gradcheck import finite_diff_grad, max_rel_err
from s2aformer.rng import RngStream
from s2aformer.tensor import BranchTrace, MacCounter, Tensor, backward

TOL = 1e-6


def rand(shape, seed=0):
    return RngStream(seed).normal(shape, dtype=np.float64)


def assert_grad_matches(make_loss, x_data, tol=TOL, step=1e-5):
    """Backward gradient of make_loss(x) vs central differences on x."""
    x = Tensor(x_data.copy(), requires_grad=True)
    backward(make_loss(x))
    numeric = finite_diff_grad(make_loss, x, step=step)
    err = max_rel_err(x.grad, numeric.data)
    assert err < tol, "gradient mismatch: rel err %.3e" % err


class TestBackwardMechanics:
    def test_rejects_non_tensor(self):
        with pytest.raises(ParameterError):
            backward(3.0)

    def test_rejects_non_scalar(self):
        with pytest.raises(DimensionError):
            backward(Tensor(rand((2, 2)), requires_grad=True))

    def test_second_backward_raises(self):
        x = Tensor(rand((3,)), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        backward(loss)
        with pytest.raises(GraphStateError):
            backward(loss)

    def test_reuse_of_consumed_subgraph_raises(self):
        x = Tensor(rand((3,)), requires_grad=True)
        y = T.mul(x, x)
        backward(T.sum_all(y))
        with pytest.raises(GraphStateError):
            backward(T.sum_all(y))

    def test_grad_accumulates_across_graphs(self):
        x = Tensor(rand((3,)), requires_grad=True)
        backward(T.sum_all(x))
        first = x.grad.copy()
        backward(T.sum_all(x))
        np.testing.assert_allclose(x.grad, 2.0 * first, rtol=1e-12)

    def test_fan_out_sums_contributions(self):
        """d/dx of (x*x + x) is 2x + 1 when x feeds two branches."""
        data = rand((4,), 2)
        x = Tensor(data.copy(), requires_grad=True)
        backward(T.sum_all(T.add(T.mul(x, x), x)))
        np.testing.assert_allclose(x.grad, 2.0 * data + 1.0, rtol=1e-10)

    def test_no_requires_grad_is_a_quiet_noop(self):
        x = Tensor(rand((3,)))
        backward(T.sum_all(x))
        assert x.grad is None


class TestOpGradients:
    """Each op wrapped into a scalar loss and probed coordinate by coordinate."""

    @pytest.mark.parametrize("seed", range(3))
    def test_add_bias_broadcast(self, seed):
        b = Tensor(rand((4,), seed + 50), requires_grad=True)
        x_data = rand((3, 4), seed)

        def loss_b(t):
            return T.sum_all(T.mul(T.add(Tensor(x_data), t),
                                   Tensor(rand((3, 4), 99))))
        backward(loss_b(b))
        numeric = finite_diff_grad(loss_b, b, step=1e-5)
        assert max_rel_err(b.grad, numeric.data) < TOL

    def test_mul_same_shape(self):
        w = rand((3, 4), 7)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(T.mul(t, t), Tensor(w))), rand((3, 4)))

    def test_mul_channel_gate_both_sides(self):
        gate_data = rand((2, 3, 1, 1), 5)
        x_data = rand((2, 3, 4, 4), 6)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(t, Tensor(gate_data))), x_data)
        g = Tensor(gate_data.copy(), requires_grad=True)

        def loss_g(t):
            return T.sum_all(T.mul(Tensor(x_data), t))
        backward(loss_g(g))
        numeric = finite_diff_grad(loss_g, g, step=1e-5)
        assert max_rel_err(g.grad, numeric.data) < TOL

    def test_mul_scalar(self):
        assert_grad_matches(
            lambda t: T.sum_all(T.mul_scalar(T.mul(t, t), -1.5)), rand((3, 3)))

    def test_reshape_transpose_narrow_concat(self):
        w = rand((12,), 9)

        def loss(t):
            y = T.transpose(T.reshape(t, (4, 3)), (1, 0))
            y = T.concat([T.narrow(y, 1, 0, 2), T.narrow(y, 1, 2, 2)], axis=1)
            return T.sum_all(T.mul(T.reshape(y, (12,)), Tensor(w)))
        assert_grad_matches(loss, rand((2, 6)))

    @pytest.mark.parametrize("seed", range(3))
    def test_relu_away_from_kink(self, seed):
        data = rand((4, 4), seed)
        data[np.abs(data) < 0.05] = 0.1
        w = rand((4, 4), seed + 30)
        assert_grad_matches(lambda t: T.sum_all(T.mul(T.relu(t), Tensor(w))), data)

    @pytest.mark.parametrize("fn", [T.gelu, T.sigmoid])
    def test_smooth_activations(self, fn):
        w = rand((4, 5), 3)
        assert_grad_matches(lambda t: T.sum_all(T.mul(fn(t), Tensor(w))),
                            rand((4, 5), 1))

    def test_softmax(self):
        w = rand((3, 6), 4)
        assert_grad_matches(lambda t: T.sum_all(T.mul(T.softmax(t), Tensor(w))),
                            rand((3, 6), 2))

    def test_layer_norm_all_inputs(self):
        x_data, g_data, b_data = rand((5, 8)), rand((8,), 1), rand((8,), 2)
        w = rand((5, 8), 3)
        gain, bias = Tensor(g_data.copy(), requires_grad=True), Tensor(
            b_data.copy(), requires_grad=True)

        def loss_x(t):
            return T.sum_all(T.mul(T.layer_norm(t, gain, bias), Tensor(w)))
        assert_grad_matches(loss_x, x_data, tol=5e-6)

        x = Tensor(x_data)
        for param, make in ((gain, lambda t: T.layer_norm(x, t, bias)),
                            (bias, lambda t: T.layer_norm(x, gain, t))):
            param.grad = None

            def loss_p(t, make=make):
                return T.sum_all(T.mul(make(t), Tensor(w)))
            backward(loss_p(param))
            numeric = finite_diff_grad(loss_p, param, step=1e-5)
            assert max_rel_err(param.grad, numeric.data) < TOL

    def test_batch_norm_inference(self):
        mean, var = Tensor(rand((3,), 1)), Tensor(np.abs(rand((3,), 2)) + 0.5)
        gain, bias = Tensor(rand((3,), 3)), Tensor(rand((3,), 4))
        w = rand((2, 3, 4, 4), 5)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(
                T.batch_norm_inference(t, gain, bias, mean, var), Tensor(w))),
            rand((2, 3, 4, 4)))

    def test_matmul_both_operands(self):
        a_data, b_data = rand((3, 4)), rand((4, 5), 1)
        w = rand((3, 5), 2)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(T.matmul(t, Tensor(b_data)), Tensor(w))),
            a_data)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(T.matmul(Tensor(a_data), t), Tensor(w))),
            b_data)

    def test_linear_weight_and_bias(self):
        x = Tensor(rand((6, 5)))
        w_data, b_data = rand((5, 7), 1), rand((7,), 2)
        probe = rand((6, 7), 3)
        weight = Tensor(w_data.copy(), requires_grad=True)
        bias = Tensor(b_data.copy(), requires_grad=True)

        for param, make in ((weight, lambda t: T.linear(x, t, bias)),
                            (bias, lambda t: T.linear(x, weight, t))):
            param.grad = None

            def loss(t, make=make):
                return T.sum_all(T.mul(make(t), Tensor(probe)))
            backward(loss(param))
            numeric = finite_diff_grad(loss, param, step=1e-5)
            assert max_rel_err(param.grad, numeric.data) < TOL

    @pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 2)])
    def test_conv2d_input_weight_bias(self, stride, padding, groups):
        x_data = rand((1, 4, 5, 5))
        w_data = rand((4, 4 // groups, 3, 3), 1)
        b_data = rand((4,), 2)
        out_side = (5 + 2 * padding - 3) // stride + 1
        probe = rand((1, 4, out_side, out_side), 3)
        weight = Tensor(w_data.copy(), requires_grad=True)
        bias = Tensor(b_data.copy(), requires_grad=True)

        def conv(x, w, b):
            return T.conv2d(x, w, b, stride=stride, padding=padding, groups=groups)

        assert_grad_matches(
            lambda t: T.sum_all(T.mul(conv(t, weight, bias), Tensor(probe))),
            x_data)
        for param, make in ((weight, lambda t: conv(Tensor(x_data), t, bias)),
                            (bias, lambda t: conv(Tensor(x_data), weight, t))):
            param.grad = None

            def loss(t, make=make):
                return T.sum_all(T.mul(make(t), Tensor(probe)))
            backward(loss(param))
            numeric = finite_diff_grad(loss, param, step=1e-5)
            assert max_rel_err(param.grad, numeric.data) < TOL

    def test_pooling_ops(self):
        probe = rand((2, 3, 2, 2), 1)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(T.avg_pool2d(t, 2), Tensor(probe))),
            rand((2, 3, 4, 4)))
        probe2 = rand((2, 3), 2)
        assert_grad_matches(
            lambda t: T.sum_all(T.mul(T.global_avg_pool(t), Tensor(probe2))),
            rand((2, 3, 4, 4)))

    @pytest.mark.parametrize("seed", range(3))
    def test_cross_entropy(self, seed):
        labels = RngStream(seed).integers(0, 4, shape=(5,))
        assert_grad_matches(lambda t: T.cross_entropy(t, labels),
                            rand((5, 4), seed))

    def test_dropout_routes_gradient_through_mask(self):
        """Survivors pass scaled gradient, dropped coordinates get zero."""
        x = Tensor(rand((64,)), requires_grad=True)
        out = T.dropout(x, 0.5, rng=RngStream(0, 1), training=True)
        mask = (out.data != 0).astype(np.float64) * 2.0
        backward(T.sum_all(out))
        np.testing.assert_allclose(x.grad, mask, rtol=1e-12)


class TestMacCounter:
    def test_matmul_tally(self):
        with MacCounter() as counter:
            T.matmul(Tensor(rand((3, 4))), Tensor(rand((4, 5))))
        assert counter.total == 3 * 4 * 5

    def test_linear_tally(self):
        with MacCounter() as counter:
            T.linear(Tensor(rand((6, 5))), Tensor(rand((5, 7))),
                     Tensor(rand((7,))))
        assert counter.total == 6 * 5 * 7

    @pytest.mark.parametrize("stride,padding,groups,expect", [
        (1, 1, 1, 6 * 6 * 8 * 4 * 9),
        (2, 1, 4, 3 * 3 * 8 * 1 * 9),
    ])
    def test_conv_tally(self, stride, padding, groups, expect):
        x = Tensor(rand((1, 4, 6, 6)))
        w = Tensor(rand((8, 4 // groups, 3, 3)))
        with MacCounter() as counter:
            T.conv2d(x, w, stride=stride, padding=padding, groups=groups)
        assert counter.total == expect

    def test_free_ops_count_zero(self):
        x = Tensor(rand((2, 4, 4, 4)))
        with MacCounter() as counter:
            T.relu(x)
            T.gelu(x)
            T.softmax(Tensor(rand((3, 5))))
            T.avg_pool2d(x, 2)
            T.global_avg_pool(x)
            T.layer_norm(Tensor(rand((3, 5))), Tensor(rand((5,))),
                         Tensor(rand((5,))))
        assert counter.total == 0

    def test_nested_counters_both_tally(self):
        with MacCounter() as outer:
            T.matmul(Tensor(rand((2, 2))), Tensor(rand((2, 2))))
            with MacCounter() as inner:
                T.matmul(Tensor(rand((2, 2))), Tensor(rand((2, 2))))
        assert inner.total == 8
        assert outer.total == 16


class TestBranchTrace:
    def test_identical_passes_agree(self):
        x = Tensor(rand((4, 4)))
        with BranchTrace() as trace:
            T.relu(x)
            T.relu(x)
        assert trace.halves_agree()

    def test_sign_flip_detected(self):
        data = rand((4, 4))
        with BranchTrace() as trace:
            T.relu(Tensor(data))
            T.relu(Tensor(-data))
        assert not trace.halves_agree()

    def test_odd_trace_rejected(self):
        with BranchTrace() as trace:
            T.relu(Tensor(rand((2, 2))))
        with pytest.raises(ParameterError):
            trace.halves_agree()

    def test_inactive_trace_records_nothing(self):
        with BranchTrace() as trace:
            pass
        T.relu(Tensor(rand((2, 2))))
        assert trace.masks == []
