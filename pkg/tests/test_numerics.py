import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from v2ir.numerics import (
    ParamStore,
    Rng,
    Tensor,
    activation,
    backward,
    concat,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    default_dtype,
    gaussian_init,
    get_default_dtype,
    grad_check,
    instance_norm,
    log_clamped,
    sgd_step,
)
from v2ir.utils import NumericalError

GRAD_TOL = 1e-4


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, j, r, s] = np.sum(patch * w[j]) + b[j]
    return out


def weighted_sum(out, rng):
    """Scalar loss sum(out * u) with fixed random u, so every output matters."""
    return (out * Tensor(rng.normal(0.0, 1.0, out.shape))).sum()


class TestTensor(unittest.TestCase):
    def test_default_dtype_is_float32(self):
        self.assertEqual(get_default_dtype(), np.float32)
        self.assertEqual(Tensor([1.0, 2.0]).dtype, np.float32)

    def test_default_dtype_context_restores(self):
        with default_dtype(np.float64):
            self.assertEqual(Tensor([1.0]).dtype, np.float64)
        self.assertEqual(Tensor([1.0]).dtype, np.float32)

    def test_rejects_empty_extents(self):
        with self.assertRaises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_rejects_non_finite(self):
        with self.assertRaises(NumericalError):
            Tensor([1.0, np.nan])

    def test_backward_needs_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with self.assertRaises(ValueError):
            backward(t * 2.0)

    def test_backward_overwrites_gradients(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward((x * 3.0).sum())
        first = x.grad.copy()
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, first)
        np.testing.assert_array_equal(first, [3.0, 3.0, 3.0])

    def test_interior_gradients_are_released(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        hidden = x * 2.0
        backward(hidden.sum())
        self.assertIsNone(hidden.grad)
        self.assertIsNotNone(x.grad)

    def test_shared_node_gradient_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [4.0])

    def test_detach_cuts_graph(self):
        x = Tensor([1.0], requires_grad=True)
        self.assertFalse(x.detach().requires_grad)

    def test_item_needs_single_element(self):
        self.assertEqual(Tensor([[2.5]]).item(), 2.5)
        with self.assertRaises(ValueError):
            Tensor([1.0, 2.0]).item()


class TestConvolution(unittest.TestCase):
    def test_output_size(self):
        self.assertEqual(conv_output_size(32, 4, 2, 1), 16)
        self.assertEqual(conv_output_size(5, 3, 1, 0), 3)

    def test_conv2d_matches_naive_loops(self):
        rng = Rng(3, "conv")
        with default_dtype(np.float64):
            for stride, pad in ((1, 0), (2, 1), (1, 2)):
                x = rng.normal(size=(2, 3, 7, 6))
                w = rng.normal(size=(4, 3, 3, 3))
                b = rng.normal(size=4)
                out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
                np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), atol=1e-10)

    def test_transposed_output_size(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        w = Tensor(np.ones((2, 3, 4, 4)))
        self.assertEqual(conv_transpose2d(x, w, Tensor(np.zeros(3)), 2, 1).shape, (1, 3, 8, 8))

    def test_channel_mismatch_raises(self):
        with self.assertRaises(ValueError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))

    def test_adjointness(self):
        """<conv2d(x, w), u> == <x, conv_transpose2d(u, w)> for zero biases."""
        rng = Rng(11, "adjoint")
        with default_dtype(np.float64):
            for trial in range(50):
                case = rng.child(str(trial))
                kernel = int(case.integers(1, 5))
                stride = int(case.integers(1, 3))
                pad = int(case.integers(0, kernel // 2 + 1))
                steps = int(case.integers(1, 5))
                size = steps * stride - 2 * pad + kernel
                c_in, c_out, n = (int(v) for v in case.integers(1, 4, size=3))
                x = Tensor(case.normal(size=(n, c_in, size, size)))
                w = Tensor(case.normal(size=(c_out, c_in, kernel, kernel)))
                y = conv2d(x, w, Tensor(np.zeros(c_out)), stride, pad)
                u = Tensor(case.normal(size=y.shape))
                back = conv_transpose2d(u, w, Tensor(np.zeros(c_in)), stride, pad)
                self.assertEqual(back.shape, x.shape)
                lhs = float(np.sum(y.data * u.data))
                rhs = float(np.sum(x.data * back.data))
                self.assertTrue(
                    np.isclose(lhs, rhs, rtol=1e-6, atol=1e-9),
                    f"trial {trial}: {lhs} != {rhs}",
                )


class TestActivations(unittest.TestCase):
    def test_tanh_and_sigmoid_stay_strictly_inside_range(self):
        x = Tensor([-100.0, -5.0, 0.0, 5.0, 100.0])
        tanh = activation(x, "tanh").data
        sigmoid = activation(x, "sigmoid").data
        self.assertTrue(np.all(tanh > -1) and np.all(tanh < 1))
        self.assertTrue(np.all(sigmoid > 0) and np.all(sigmoid < 1))

    def test_leaky_relu_slope(self):
        out = activation(Tensor([-1.0, 2.0]), "leaky_relu", alpha=0.2)
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    def test_unknown_activation(self):
        with self.assertRaises(ValueError):
            activation(Tensor([1.0]), "swish")

    def test_log_clamped_bounds(self):
        out = log_clamped(Tensor([0.0, 1.0]))
        self.assertTrue(np.all(np.isfinite(out.data)))

    def test_instance_norm_standardizes(self):
        rng = Rng(5, "norm")
        with default_dtype(np.float64):
            x = Tensor(rng.normal(3.0, 2.0, (2, 3, 5, 5)))
            out = instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        np.testing.assert_allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(2, 3)), 1.0, atol=1e-5)

    def test_instance_norm_constant_channel_and_pair(self):
        with default_dtype(np.float64):
            constant = Tensor(np.full((1, 1, 3, 3), 4.0))
            out = instance_norm(constant, Tensor([2.0]), Tensor([0.7])).data
            np.testing.assert_allclose(out, 0.7)
            pair = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
            out = instance_norm(pair, Tensor([1.0]), Tensor([0.0])).data
        np.testing.assert_allclose(out.reshape(-1), [-1.0, 1.0], atol=1e-4)


class TestGradients(unittest.TestCase):
    """Central differences in 64-bit against backward for every layer op."""

    def setUp(self):
        self.rng = Rng(7, "grad")

    def check(self, build, shapes, **kwargs):
        with default_dtype(np.float64):
            params = ParamStore()
            for name, (shape, offset) in shapes.items():
                values = self.rng.child(name).normal(0.0, 1.0, shape)
                if offset:
                    values = np.sign(values) * (np.abs(values) + offset)
                params.add(name, Tensor(values))
            error = grad_check(lambda p: weighted_sum(build(p), Rng(7, "loss")), params, **kwargs)
        self.assertLess(error, GRAD_TOL)

    def test_conv2d(self):
        self.check(
            lambda p: conv2d(p["x"], p["w"], p["b"], stride=2, pad=1),
            {"x": ((2, 2, 8, 8), 0), "w": ((3, 2, 4, 4), 0), "b": ((3,), 0)},
        )

    def test_conv_transpose2d(self):
        self.check(
            lambda p: conv_transpose2d(p["x"], p["w"], p["b"], stride=2, pad=1),
            {"x": ((2, 3, 4, 4), 0), "w": ((3, 2, 4, 4), 0), "b": ((2,), 0)},
        )

    def test_instance_norm(self):
        self.check(
            lambda p: instance_norm(p["x"], p["gamma"], p["beta"]),
            {"x": ((2, 3, 4, 4), 0), "gamma": ((3,), 0), "beta": ((3,), 0)},
        )

    def test_activations(self):
        for kind in ("relu", "leaky_relu", "tanh", "sigmoid"):
            with self.subTest(kind=kind):
                self.check(lambda p, kind=kind: activation(p["x"], kind), {"x": ((2, 2, 4, 4), 0.1)})

    def test_concat_and_arithmetic(self):
        self.check(
            lambda p: concat([p["a"] * p["a"], p["b"].abs()], axis=1),
            {"a": ((1, 2, 3, 3), 0), "b": ((1, 1, 3, 3), 0.1)},
        )

    def test_log_clamped(self):
        with default_dtype(np.float64):
            params = ParamStore()
            params.add("p", Tensor(self.rng.uniform(0.1, 0.9, (3, 4))))
            error = grad_check(lambda p: (log_clamped(p["p"]) * 2.0).mean(), params)
        self.assertLess(error, GRAD_TOL)

    def test_random_conv_shapes(self):
        shapes = Rng(8, "shapes")
        for trial in range(24):
            case = shapes.child(str(trial))
            kernel = int(case.integers(1, 5))
            stride = int(case.integers(1, 3))
            pad = int(case.integers(0, (kernel - 1) // 2 + 1))
            c_in, c_out, n = (int(v) for v in case.integers(1, 4, size=3))
            size = kernel + int(case.integers(0, 4))
            transposed = bool(trial % 2)
            with self.subTest(trial=trial, kernel=kernel, stride=stride, pad=pad, transposed=transposed):
                if transposed:
                    self.check(
                        lambda p, s=stride, q=pad: conv_transpose2d(p["x"], p["w"], p["b"], s, q),
                        {"x": ((n, c_in, size, size), 0), "w": ((c_in, c_out, kernel, kernel), 0),
                         "b": ((c_out,), 0)},
                        max_coords=30,
                        rng=case,
                    )
                else:
                    self.check(
                        lambda p, s=stride, q=pad: conv2d(p["x"], p["w"], p["b"], s, q),
                        {"x": ((n, c_in, size, size), 0), "w": ((c_out, c_in, kernel, kernel), 0),
                         "b": ((c_out,), 0)},
                        max_coords=30,
                        rng=case,
                    )

    def test_sampled_coordinates(self):
        self.check(
            lambda p: conv2d(p["x"], p["w"], p["b"], stride=1, pad=1),
            {"x": ((1, 4, 8, 8), 0), "w": ((4, 4, 3, 3), 0), "b": ((4,), 0)},
            max_coords=40,
        )


class TestGradCheck(unittest.TestCase):
    def params(self):
        params = ParamStore()
        params.add("x", Tensor(Rng(12, "x").uniform(-0.1, 0.1, (2, 3))))
        return params

    def test_linear_function_is_exact(self):
        with default_dtype(np.float64):
            u = Tensor(np.arange(1.0, 7.0).reshape(2, 3))
            error = grad_check(lambda p: (p["x"] * u).sum(), self.params())
        self.assertLess(error, 1e-9)

    def test_flags_one_doubled_entry(self):
        def doubled_first_entry(x):
            def _backward(g):
                wrong = g.copy()
                wrong.reshape(-1)[0] *= 2
                x.grad += wrong

            return Tensor._from_op(x.data.copy(), (x,), _backward, "doubled_first_entry")

        with default_dtype(np.float64):
            u = Tensor(np.arange(1.0, 7.0).reshape(2, 3))
            error = grad_check(lambda p: (doubled_first_entry(p["x"]) * u).sum(), self.params())
        self.assertGreater(error, 0.1)

    def test_ignores_gradient_from_an_earlier_pass(self):
        with default_dtype(np.float64):
            params = self.params()
            backward((params["x"] * 5.0).sum())
            error = grad_check(lambda p: Tensor(0.0) * 1.0, params)
        self.assertEqual(error, 0.0)


class TestParamStore(unittest.TestCase):
    def test_add_marks_trainable_and_rejects_duplicates(self):
        params = ParamStore()
        t = params.add("w", Tensor([1.0]))
        self.assertTrue(t.requires_grad)
        with self.assertRaises(ValueError):
            params.add("w", Tensor([2.0]))

    def test_frozen_restores_flags(self):
        params = ParamStore()
        params.add("w", Tensor([1.0]))
        with params.frozen():
            self.assertFalse(params["w"].requires_grad)
        self.assertTrue(params["w"].requires_grad)

    def test_digest_tracks_values(self):
        params = ParamStore()
        params.add("w", Tensor([1.0, 2.0]))
        before = params.digest()
        params["w"].data[0] = 5.0
        self.assertNotEqual(before, params.digest())

    def test_sgd_step(self):
        params = ParamStore()
        w = params.add("w", Tensor([1.0, -1.0]))
        backward((w * w).sum())
        sgd_step(params, 0.25)
        np.testing.assert_allclose(w.data, [0.5, -0.5])

    def test_sgd_step_without_gradient(self):
        params = ParamStore()
        params.add("w", Tensor([1.0]))
        with self.assertRaises(ValueError):
            sgd_step(params, 0.1)

    def test_sgd_step_rejects_stale_gradient(self):
        params = ParamStore()
        a = params.add("a", Tensor([1.0]))
        b = params.add("b", Tensor([1.0]))
        backward((a * 5.0 + b).sum())
        backward((b * 1.0).sum())
        with self.assertRaises(ValueError):
            sgd_step(params, 0.1)
        np.testing.assert_array_equal(a.data, [1.0])
        np.testing.assert_array_equal(b.data, [1.0])

        only_b = ParamStore()
        only_b.add("b", b)
        sgd_step(only_b, 0.1)
        np.testing.assert_allclose(b.data, [0.9])

    def test_sgd_step_after_constant_loss(self):
        params = ParamStore()
        w = params.add("w", Tensor([1.0]))
        backward((w * w).sum())
        backward(Tensor(3.0))
        with self.assertRaises(ValueError):
            sgd_step(params, 0.1)

    def test_sgd_minimizes_square(self):
        params = ParamStore()
        p = params.add("p", Tensor([1.0]))
        for _ in range(100):
            backward((p * p).sum())
            sgd_step(params, 0.1)
        self.assertLess(abs(float(p.data[0])), 1e-4)


class TestRng(unittest.TestCase):
    def test_same_name_same_stream(self):
        np.testing.assert_array_equal(
            Rng(4, "a").child("b").normal(size=8), Rng(4, "a/b").normal(size=8)
        )

    def test_children_are_independent(self):
        rng = Rng(4)
        self.assertFalse(np.array_equal(rng.child("x").normal(size=8), rng.child("y").normal(size=8)))

    def test_seed_range(self):
        with self.assertRaises(ValueError):
            Rng(-1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**64 - 1), st.text(max_size=12))
    def test_streams_reproduce(self, seed, label):
        np.testing.assert_array_equal(
            Rng(seed, label).uniform(size=4), Rng(seed, label).uniform(size=4)
        )

    def test_gaussian_init_statistics(self):
        t = gaussian_init((100, 1000), 0.0, 0.02, Rng(0, "init"))
        self.assertAlmostEqual(float(t.data.std()), 0.02, delta=0.02 * 0.02)
        self.assertAlmostEqual(float(t.data.mean()), 0.0, delta=0.001)
        self.assertTrue(t.requires_grad)

    def test_gaussian_init_zero_std(self):
        t = gaussian_init((4, 5), 0.0, 0.0, Rng(0, "init"))
        np.testing.assert_array_equal(t.data, np.zeros((4, 5)))


if __name__ == "__main__":
    unittest.main()
