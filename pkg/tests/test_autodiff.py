import math

import numpy as np
import pytest

from src.core.autodiff import (
    Adam,
    AdamState,
    ConvLayerSpec,
    Tensor,
    adam_step,
    add,
    backward,
    check_gradients,
    conv2d,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    square,
    subtract,
    tconv2d,
)
from src.core.errors import InvalidArgumentError


def layer(rng, c_in, c_out, k, transposed=False, name="l"):
    return ConvLayerSpec.create(c_in, c_out, k, rng, transposed=transposed, name=name)


def with_random_bias(spec, rng):
    spec.bias.data[...] = rng.normal(size=spec.bias.shape)
    return spec


def conv_loops(x, w, b):
    """Six nested loops: cross-correlation, zero same-padding."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, c_out, h, wd))
    for i_n in range(n):
        for o in range(c_out):
            for y in range(h):
                for x_ in range(wd):
                    acc = b[o]
                    for c in range(c_in):
                        for i in range(k):
                            for j in range(k):
                                yy, xx = y + i - p, x_ + j - p
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[o, c, i, j] * x[i_n, c, yy, xx]
                    out[i_n, o, y, x_] = acc
    return out


def tconv_loops(x, w, b):
    """Scatter form of the transposed convolution; w is (in, out, k, k)."""
    n, c_in, h, wd = x.shape
    _, c_out, k, _ = w.shape
    p = k // 2
    out = np.zeros((n, c_out, h, wd)) + b[None, :, None, None]
    for i_n in range(n):
        for a in range(c_in):
            for y in range(h):
                for x_ in range(wd):
                    for o in range(c_out):
                        for i in range(k):
                            for j in range(k):
                                yy, xx = y + i - p, x_ + j - p
                                if 0 <= yy < h and 0 <= xx < wd:
                                    out[i_n, o, yy, xx] += w[a, o, i, j] * x[i_n, a, y, x_]
    return out


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        spec = ConvLayerSpec(1, 1, 1, parameter(np.ones((1, 1, 1, 1)), "w"), parameter(np.zeros(1), "b"))
        x = Tensor(rng.normal(size=(2, 1, 4, 5)))
        np.testing.assert_array_equal(conv2d(x, spec).data, x.data)

    def test_bias_only(self, rng):
        spec = ConvLayerSpec(2, 3, 3, parameter(np.zeros((3, 2, 3, 3)), "w"),
                             parameter(np.array([0.5, -1.0, 2.0]), "b"))
        out = conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), spec)
        for o, b in enumerate([0.5, -1.0, 2.0]):
            assert np.all(out.data[0, o] == b)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            spec = with_random_bias(layer(rng, 2, 3, k), rng)
            x = rng.normal(size=(1, 2, 5, 5))
            np.testing.assert_allclose(conv2d(Tensor(x), spec).data,
                                       conv_loops(x, spec.weight.data, spec.bias.data), atol=1e-9)

    def test_preserves_spatial_dims(self, rng):
        spec = layer(rng, 3, 2, 5)
        for h, w in [(5, 5), (7, 12), (13, 6)]:
            assert conv2d(Tensor(rng.normal(size=(2, 3, h, w))), spec).shape == (2, 2, h, w)

    def test_linear_in_input(self, rng):
        spec = layer(rng, 2, 2, 3)
        x, y = rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(1, 2, 6, 6))
        lhs = conv2d(Tensor(2.0 * x - 3.0 * y), spec).data
        rhs = 2.0 * conv2d(Tensor(x), spec).data - 3.0 * conv2d(Tensor(y), spec).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), layer(rng, 2, 2, 3))

    def test_rejects_transposed_spec(self, rng):
        with pytest.raises(InvalidArgumentError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), layer(rng, 2, 2, 3, transposed=True))

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ConvLayerSpec(1, 1, 2, parameter(np.zeros((1, 1, 2, 2)), "w"), parameter(np.zeros(1), "b"))


class TestTConv2d:
    def test_one_by_one_identity(self, rng):
        spec = ConvLayerSpec(1, 1, 1, parameter(np.ones((1, 1, 1, 1)), "w"), parameter(np.zeros(1), "b"),
                             transposed=True)
        x = Tensor(rng.normal(size=(1, 1, 3, 6)))
        np.testing.assert_array_equal(tconv2d(x, spec).data, x.data)

    def test_zero_input_gives_bias(self, rng):
        spec = with_random_bias(layer(rng, 3, 2, 3, transposed=True), rng)
        out = tconv2d(Tensor(np.zeros((1, 3, 4, 4))), spec)
        np.testing.assert_allclose(out.data, np.broadcast_to(spec.bias.data[None, :, None, None], out.shape))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            spec = with_random_bias(layer(rng, 2, 3, k, transposed=True), rng)
            x = rng.normal(size=(1, 2, 5, 4))
            np.testing.assert_allclose(tconv2d(Tensor(x), spec).data,
                                       tconv_loops(x, spec.weight.data, spec.bias.data), atol=1e-9)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            c_in, c_out, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
            w = rng.normal(size=(c_out, c_in, k, k))
            fwd = ConvLayerSpec(c_in, c_out, k, Tensor(w), Tensor(np.zeros(c_out)))
            adj = ConvLayerSpec(c_out, c_in, k, Tensor(w), Tensor(np.zeros(c_in)), transposed=True)
            x = rng.normal(size=(2, c_in, 6, 5))
            y = rng.normal(size=(2, c_out, 6, 5))
            lhs = np.sum(conv2d(Tensor(x), fwd).data * y)
            rhs = np.sum(x * tconv2d(Tensor(y), adj).data)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_channel_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            tconv2d(Tensor(np.zeros((1, 2, 4, 4))), layer(rng, 3, 2, 3, transposed=True))


class TestElementwise:
    def test_relu(self, rng):
        x = np.abs(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(relu(Tensor(-x)).data, 0.0)
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    def test_subtract_self_is_zero(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 3, 3)))
        np.testing.assert_array_equal(subtract(a, a).data, 0.0)

    def test_junction_formula(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        got = relu(subtract(Tensor(a), Tensor(b))).data
        expected = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            expected[idx] = max(0.0, a[idx] - b[idx])
        np.testing.assert_array_equal(got, expected)

    def test_add(self, rng):
        a, b = rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 2, 2))
        np.testing.assert_array_equal(add(Tensor(a), Tensor(b)).data, a + b)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))
        with pytest.raises(InvalidArgumentError):
            subtract(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))))


class TestBackward:
    def test_sum_of_relu_at_positive_points(self, rng):
        x = parameter(np.abs(rng.normal(size=(1, 2, 3, 3))) + 0.1, "x")
        backward(reduce_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_squared_difference(self, rng):
        a = parameter(rng.normal(size=(1, 2, 3, 3)), "a")
        b = parameter(rng.normal(size=(1, 2, 3, 3)), "b")
        backward(reduce_sum(square(subtract(a, b))))
        np.testing.assert_allclose(a.grad, 2 * (a.data - b.data), atol=1e-15)
        np.testing.assert_allclose(b.grad, -2 * (a.data - b.data), atol=1e-15)

    def test_mean_spreads_evenly(self):
        x = parameter(np.zeros((2, 1, 2, 2)), "x")
        backward(reduce_mean(x))
        np.testing.assert_allclose(x.grad, 1.0 / 8)

    def test_shared_node_accumulates(self):
        x = parameter(np.full((1, 1, 1, 1), 3.0), "x")
        backward(reduce_sum(add(x, x)))
        assert x.grad[0, 0, 0, 0] == 2.0

    def test_non_scalar_root(self):
        with pytest.raises(InvalidArgumentError):
            backward(parameter(np.zeros((1, 1, 2, 2)), "x"))

    def test_deterministic(self, rng):
        spec = layer(rng, 2, 3, 3)
        x = rng.normal(size=(2, 2, 5, 5))
        grads = []
        for _ in range(2):
            spec.weight.zero_grad()
            backward(reduce_sum(square(relu(conv2d(Tensor(x), spec)))))
            grads.append(spec.weight.grad.copy())
        assert grads[0].tobytes() == grads[1].tobytes()


class TestAdam:
    def test_zero_gradient_keeps_parameters(self, rng):
        p = {"w": rng.normal(size=(3, 3))}
        new, state = adam_step(p, {"w": np.zeros((3, 3))}, AdamState())
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_descends_along_gradient(self, rng):
        p = {"w": np.zeros(6)}
        g = np.array([1.0, -2.0, 0.5, -0.1, 3.0, -4.0])
        new, _ = adam_step(p, {"w": g}, AdamState(lr=1e-3))
        assert np.all(np.sign(new["w"]) == -np.sign(g))

    def test_scalar_reference(self):
        lr, b1, b2, eps, p, g = 1e-4, 0.9, 0.999, 1e-8, 1.0, 0.5
        m = (1 - b1) * g
        v = (1 - b2) * g * g
        expected = p - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
        new, state = adam_step({"p": np.array(p)}, {"p": np.array(g)}, AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps))
        assert float(new["p"]) == pytest.approx(expected, abs=1e-12)
        assert float(state.m["p"]) == pytest.approx(m, abs=1e-15)

    def test_inputs_untouched(self, rng):
        p = {"w": rng.normal(size=4)}
        before = p["w"].copy()
        adam_step(p, {"w": np.ones(4)}, AdamState())
        np.testing.assert_array_equal(p["w"], before)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())

    def test_optimizer_updates_in_place(self, rng):
        spec = layer(rng, 1, 1, 3)
        weight_ref = spec.weight.data
        opt = Adam(spec.parameters, lr=1e-2)
        x = Tensor(rng.normal(size=(1, 1, 4, 4)))
        opt.zero_grad()
        before = weight_ref.copy()
        backward(reduce_sum(square(conv2d(x, spec))))
        opt.step()
        assert spec.weight.data is weight_ref
        assert not np.array_equal(weight_ref, before)
        assert opt.state.step == 1

    def test_optimizer_needs_names(self):
        with pytest.raises(InvalidArgumentError):
            Adam([parameter(np.zeros(1), "a"), parameter(np.zeros(1), "a")])


class TestGradientCheck:
    def test_linear_graph(self, rng):
        x = parameter(rng.normal(size=(1, 2, 3, 3)), "x")
        report = check_gradients(lambda: reduce_sum(scale(x, 3.0)), [x])
        assert report.passed
        assert report.max_rel_error < 1e-9

    def test_relu_away_from_kink(self, rng):
        values = rng.normal(size=(1, 2, 4, 4))
        values[np.abs(values) < 1e-2] = 0.5
        x = parameter(values, "x")
        report = check_gradients(lambda: reduce_sum(square(relu(x))), [x], tolerance=1e-4)
        assert report.passed, report.failures

    @pytest.mark.parametrize("transposed", [False, True])
    def test_single_layer(self, rng, transposed):
        spec = with_random_bias(layer(rng, 2, 3, 3, transposed=transposed), rng)
        x = parameter(rng.normal(size=(1, 2, 4, 4)), "x")
        report = check_gradients(lambda: reduce_sum(square(spec(x))), [x, spec.weight, spec.bias])
        assert report.passed, report.failures

    def test_conv_tconv_stack(self, rng):
        conv = with_random_bias(layer(rng, 3, 4, 3, name="c"), rng)
        deconv = with_random_bias(layer(rng, 4, 3, 3, transposed=True, name="d"), rng)
        x = parameter(rng.normal(size=(1, 3, 4, 4)), "x")
        target = rng.normal(size=(1, 3, 4, 4))

        def graph():
            return reduce_mean(square(subtract(deconv(conv(x)), Tensor(target))))

        report = check_gradients(graph, [x] + conv.parameters + deconv.parameters, tolerance=1e-4)
        assert report.passed, report.failures
        assert {e.name for e in report.entries} == {"x", "c.weight", "c.bias", "d.weight", "d.bias"}

    def test_sampling_limits_checks(self, rng):
        x = parameter(rng.normal(size=(1, 1, 6, 6)), "x")
        report = check_gradients(lambda: reduce_sum(square(x)), [x], max_checks=5, seed=3)
        assert report.entries[0].checked == 5
        assert report.passed

    def test_reports_wrong_gradients(self, rng):
        x = parameter(rng.normal(size=(1, 1, 2, 2)), "x")

        def wrong():
            out = reduce_sum(square(x))
            # break the recorded derivative while keeping the value
            out._backward = lambda g: x._accumulate(np.full(x.shape, 7.0))
            return out

        report = check_gradients(wrong, [x])
        assert not report.passed
        assert report.failures[0].name == "x"
