import numpy as np
from expecttest import TestCase

from ..gradcheck import numeric_gradient, relative_error
from ..prelude import *

from .mlp import (
    Mlp,
    MlpGrads,
    decoder_dims,
    mlp_backward,
    mlp_backward_batch,
    mlp_forward,
    mlp_forward_batch,
    mlp_init,
    offset_mlp_dims,
    param_count,
)


def random_mlp(rng: np.random.Generator, final_relu: bool) -> Mlp:
    n_layers = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, 6, size=n_layers + 1)]
    m = mlp_init(dims, final_relu, int(rng.integers(0, 2**31)))
    for b in m.biases:
        b[:] = rng.normal(0.0, 0.5, size=b.shape)
    return m


def oracle_forward(m: Mlp, x: FloatArray) -> FloatArray:
    h = x
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        n_in, n_out = w.shape
        z = np.array(
            [sum(h[a] * w[a, j] for a in range(n_in)) + b[j] for j in range(n_out)]
        )
        last = i == len(m.weights) - 1
        h = z if last and not m.final_relu else np.maximum(z, 0.0)
    return h


class Test(TestCase):
    def test_param_count(self):
        self.assertEqual(2, param_count(Mlp.zeros([1, 1], True)))
        self.assertEqual(1678, param_count(Mlp.zeros(decoder_dims(7), True)))
        self.assertEqual(1576, param_count(Mlp.zeros(offset_mlp_dims(7), False)))
        self.assertEqual(
            3254,
            param_count(Mlp.zeros(decoder_dims(7), True))
            + param_count(Mlp.zeros(offset_mlp_dims(7), False)),
        )
        self.assertExpectedInline(
            str(decoder_dims(7)), """[11, 25, 25, 25, 3]"""
        )
        self.assertExpectedInline(
            str(offset_mlp_dims(7)), """[9, 25, 25, 25, 1]"""
        )

    def test_zero_network(self):
        m = Mlp.zeros(decoder_dims(7), True)
        out, _ = mlp_forward(m, np.arange(11, dtype=np.float64))
        self.assertEqual([0.0, 0.0, 0.0], out.tolist())

    def test_relu_clamp(self):
        m = Mlp([2, 2], [np.eye(2)], [np.zeros(2)], final_relu=True)
        out, _ = mlp_forward(m, [-1.0, 2.0])
        self.assertEqual([0.0, 2.0], out.tolist())

        m.final_relu = False
        out, _ = mlp_forward(m, [-1.0, 2.0])
        self.assertEqual([-1.0, 2.0], out.tolist())

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            final_relu = bool(rng.integers(0, 2))
            m = mlp_init([4, 6, 5, 3], final_relu, int(rng.integers(1000)))
            x = rng.normal(size=4)
            out, _ = mlp_forward(m, x)
            np.testing.assert_allclose(out, oracle_forward(m, x), atol=1e-6)

    def test_dimension_mismatch(self):
        m = Mlp.zeros([3, 2], True)
        with self.assertRaises(ContractViolation):
            mlp_forward(m, [1.0, 2.0])

        _, cache = mlp_forward(m, [1.0, 2.0, 3.0])
        with self.assertRaises(ContractViolation):
            mlp_backward(m, cache, [1.0])

    def test_init_is_deterministic(self):
        a = mlp_init(decoder_dims(7), True, 42)
        b = mlp_init(decoder_dims(7), True, 42)
        c = mlp_init(decoder_dims(7), True, 43)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
        self.assertFalse(np.array_equal(a.weights[0], c.weights[0]))
        for w in a.weights:
            self.assertLessEqual(float(np.max(np.abs(w))), math.sqrt(6.0 / w.shape[0]))
        for bias in a.biases:
            self.assertEqual(0.0, float(np.max(np.abs(bias))))

    def test_batch_rows_match_single_evaluation(self):
        rng = np.random.default_rng(1)
        m = mlp_init(decoder_dims(7), True, 5)
        x = rng.normal(size=(37, 11))
        out, _ = mlp_forward_batch(m, x)
        for n in [0, 13, 36]:
            single, _ = mlp_forward(m, x[n])
            np.testing.assert_array_equal(out[n], single)
        sub, _ = mlp_forward_batch(m, x[5:9])
        np.testing.assert_array_equal(out[5:9], sub)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(2)
        m = mlp_init([3, 4], True, 9)
        x = rng.normal(size=3)
        out, _ = mlp_forward(m, x)
        scaled, _ = mlp_forward(m, 2.5 * x)
        np.testing.assert_allclose(scaled, 2.5 * out, atol=1e-12)

    def test_constant_output(self):
        rng = np.random.default_rng(3)
        m = mlp_init(decoder_dims(7), True, 11)
        hidden = [w.copy() for w in m.weights[:-1]]
        m.set_constant_output([0.25, 0.5, 0.0])
        out, _ = mlp_forward_batch(m, rng.normal(size=(50, 11)))
        np.testing.assert_array_equal(np.tile([0.25, 0.5, 0.0], (50, 1)), out)
        for before, after in zip(hidden, m.weights[:-1]):
            np.testing.assert_array_equal(before, after)

        with self.assertRaises(ContractViolation):
            m.set_constant_output([0.1])

    def test_zero_upstream(self):
        m = mlp_init([3, 4, 2], False, 3)
        _, cache = mlp_forward(m, [0.1, -0.2, 0.3])
        grads, dx = mlp_backward(m, cache, [0.0, 0.0])
        self.assertEqual([0.0, 0.0, 0.0], dx.tolist())
        for _, g in grads.blocks("m"):
            self.assertEqual(0.0, float(np.max(np.abs(g))))

    def test_single_layer_outer_product(self):
        m = Mlp([3, 2], [np.ones((3, 2))], [np.ones(2)], final_relu=False)
        x = np.array([1.0, 2.0, 3.0])
        up = np.array([0.5, -2.0])
        _, cache = mlp_forward(m, x)
        grads, _ = mlp_backward(m, cache, up)
        np.testing.assert_array_equal(grads.weights[0], np.outer(x, up))
        np.testing.assert_array_equal(grads.biases[0], up)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        for trial in range(60):
            m = random_mlp(rng, final_relu=trial % 2 == 0)
            x = rng.normal(size=m.n_in)
            up = rng.normal(size=m.n_out)

            _, cache = mlp_forward(m, x)
            grads, dx = mlp_backward(m, cache, up)

            def f() -> float:
                return float(np.dot(mlp_forward(m, x)[0], up))

            self.assertLess(relative_error(dx, numeric_gradient(f, x)), 1e-4)
            for (_, analytic), (_, param) in zip(grads.blocks("g"), m.blocks("m")):
                self.assertLess(
                    relative_error(analytic, numeric_gradient(f, param)), 1e-4
                )

    def test_batched_backward_sums_rows(self):
        rng = np.random.default_rng(8)
        m = mlp_init([3, 5, 2], True, 1)
        for b in m.biases:
            b[:] = 0.3
        x = rng.normal(size=(6, 3))
        up = rng.normal(size=(6, 2))
        _, cache = mlp_forward_batch(m, x)
        total = MlpGrads.zeros_like(m)
        dx = mlp_backward_batch(m, cache, up, total)

        summed = MlpGrads.zeros_like(m)
        for n in range(6):
            _, row_cache = mlp_forward(m, x[n])
            row, row_dx = mlp_backward(m, row_cache, up[n])
            summed.add_(row)
            np.testing.assert_allclose(dx[n], row_dx, atol=1e-12)
        for (_, a), (_, b) in zip(total.blocks("t"), summed.blocks("s")):
            np.testing.assert_allclose(a, b, atol=1e-12)
