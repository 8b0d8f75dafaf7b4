import numpy as np
from expecttest import TestCase

from ..gradcheck import numeric_gradient, relative_error
from ..prelude import *

from .texture import (
    UV,
    FeatureTexture,
    bilinear_backward,
    bilinear_backward_batch,
    bilinear_lookup,
    blur_backward,
    gaussian_blur,
    gaussian_kernel,
)


def point_inside_cells(rng: np.random.Generator, res: int, margin: float = 0.01) -> UV:
    # keeps finite-difference steps from straddling a cell edge
    while True:
        p = rng.uniform(-2.0, 3.0, size=2)
        frac = np.mod(p * res - 0.5, 1.0)
        if np.all(frac > margin) and np.all(frac < 1 - margin):
            return (float(p[0]), float(p[1]))


class Test(TestCase):
    def test_constant_texture(self):
        tex = FeatureTexture.from_values(1, 1, [3.0])
        for p in [(0.0, 0.0), (0.3, 0.9), (-4.2, 17.5)]:
            self.assertAlmostEqual(3.0, bilinear_lookup(tex, p)[0], places=12)

    def test_texel_center_and_cell_center(self):
        tex = FeatureTexture.from_values(2, 1, [0, 1, 2, 3])
        self.assertEqual(0.0, bilinear_lookup(tex, (0.25, 0.25))[0])
        self.assertEqual(1.0, bilinear_lookup(tex, (0.75, 0.25))[0])
        self.assertEqual(2.0, bilinear_lookup(tex, (0.25, 0.75))[0])
        self.assertAlmostEqual(1.5, bilinear_lookup(tex, (0.5, 0.5))[0], places=12)

    def test_backward_examples(self):
        tex = FeatureTexture.from_values(1, 1, [3.0])
        texel_grads, coord = bilinear_backward(tex, (0.37, 0.81), [1.0])
        self.assertEqual([0.0, 0.0], coord.tolist())
        self.assertEqual([(0, 0)], list(texel_grads))
        self.assertAlmostEqual(1.0, texel_grads[(0, 0)][0], places=12)

        tex = FeatureTexture.from_values(2, 1, [0, 1, 2, 3])
        texel_grads, _ = bilinear_backward(tex, (0.5, 0.5), [1.0])
        self.assertEqual(4, len(texel_grads))
        for g in texel_grads.values():
            self.assertAlmostEqual(0.25, g[0], places=12)

    def test_periodicity_and_bounds(self):
        rng = np.random.default_rng(3)
        tex = FeatureTexture.random_normal(8, 3, rng, 1.0)
        for _ in range(50):
            p = (float(rng.uniform()), float(rng.uniform()))
            m, n = rng.integers(-5, 5, size=2)
            base = bilinear_lookup(tex, p)
            shifted = bilinear_lookup(tex, (p[0] + m, p[1] + n))
            np.testing.assert_allclose(shifted, base, atol=1e-10)

            x = p[0] * 8 - 0.5
            y = p[1] * 8 - 0.5
            i0, j0 = int(np.floor(x)), int(np.floor(y))
            corners = np.array(
                [
                    tex.data[(j0 + dj) % 8, (i0 + di) % 8]
                    for dj in (0, 1)
                    for di in (0, 1)
                ]
            )
            self.assertTrue(np.all(base >= corners.min(axis=0) - 1e-12))
            self.assertTrue(np.all(base <= corners.max(axis=0) + 1e-12))

    def test_partition_of_unity(self):
        tex = FeatureTexture(np.full((16, 16, 2), 0.7))
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = (float(rng.uniform(-3, 3)), float(rng.uniform(-3, 3)))
            np.testing.assert_allclose(bilinear_lookup(tex, p), [0.7, 0.7], atol=1e-14)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            c = int(rng.integers(1, 4))
            tex = FeatureTexture.random_normal(8, c, rng, 1.0)
            p = point_inside_cells(rng, 8)
            up = rng.normal(size=c)

            grad_tex = np.zeros_like(tex.data)
            coord = bilinear_backward_batch(
                tex, np.array([p]), up[None, :], grad_out=grad_tex
            )[0]

            uv = np.array(p, dtype=np.float64)

            def f_coord() -> float:
                return float(np.dot(bilinear_lookup(tex, (uv[0], uv[1])), up))

            numeric_coord = numeric_gradient(f_coord, uv, eps=1e-4)
            self.assertLess(relative_error(coord, numeric_coord), 1e-4)

            def f_tex() -> float:
                return float(np.dot(bilinear_lookup(tex, p), up))

            numeric_tex = numeric_gradient(f_tex, tex.data, eps=1e-4)
            self.assertLess(relative_error(grad_tex, numeric_tex), 1e-4)

    def test_blur_identity_cases(self):
        rng = np.random.default_rng(5)
        tex = FeatureTexture.random_normal(8, 2, rng, 1.0)
        np.testing.assert_array_equal(gaussian_blur(tex, 0.0).data, tex.data)

        const = FeatureTexture(np.full((8, 8, 2), -1.25))
        blurred = gaussian_blur(const, 2.5)
        np.testing.assert_allclose(blurred.data, const.data, atol=1e-12)

    def test_blur_matches_dense_convolution(self):
        data = np.zeros((8, 8, 1))
        data[2, 5, 0] = 1.0
        out = gaussian_blur(FeatureTexture(data), 1.0).data
        self.assertAlmostEqual(1.0, float(out.sum()), places=12)

        k = gaussian_kernel(1.0)
        radius = (k.size - 1) // 2
        expected = np.zeros_like(data)
        for j in range(8):
            for i in range(8):
                acc = 0.0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        acc += (
                            k[dy + radius]
                            * k[dx + radius]
                            * data[(j + dy) % 8, (i + dx) % 8, 0]
                        )
                expected[j, i, 0] = acc
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_blur_kernel_wider_than_texture(self):
        data = np.zeros((4, 4, 1))
        data[0, 0, 0] = 1.0
        out = gaussian_blur(FeatureTexture(data), 8.0).data
        self.assertAlmostEqual(1.0, float(out.sum()), places=12)

    def test_blur_preserves_mean(self):
        rng = np.random.default_rng(6)
        tex = FeatureTexture.random_normal(16, 3, rng, 1.0)
        for sigma in [0.5, 1.0, 3.0, 8.0]:
            before = tex.data.mean(axis=(0, 1))
            after = gaussian_blur(tex, sigma).data.mean(axis=(0, 1))
            self.assertLess(float(np.max(np.abs(before - after))), 1e-6)

    def test_blur_backward(self):
        rng = np.random.default_rng(7)
        g = rng.normal(size=(8, 8, 2))
        np.testing.assert_array_equal(blur_backward(g, 0.0), g)

        const = np.full((8, 8, 2), 0.5)
        np.testing.assert_allclose(blur_backward(const, 1.5), const, atol=1e-12)

        for _ in range(60):
            res = 2 ** int(rng.integers(0, 5))
            channels = int(rng.integers(1, 8))
            sigma = float(rng.uniform(0.3, 4.0))
            shape = (res, res, channels)
            g = rng.normal(size=shape)
            x = rng.normal(size=shape)
            direction = rng.normal(size=shape)
            eps = 1e-4
            plus = gaussian_blur(FeatureTexture(x + eps * direction), sigma).data
            minus = gaussian_blur(FeatureTexture(x - eps * direction), sigma).data
            numeric = float(np.sum(g * (plus - minus))) / (2 * eps)
            analytic = float(np.sum(blur_backward(g, sigma) * direction))
            self.assertLess(relative_error(analytic, numeric), 1e-5)
