import numpy as np
from expecttest import TestCase

from ..gradcheck import numeric_gradient, relative_error
from ..prelude import *
from ..texture import UV, FeatureTexture, bilinear_backward, bilinear_lookup

from .pyramid import (
    NeuralPyramid,
    level_of_detail,
    trilinear_backward,
    trilinear_backward_batch,
    trilinear_lookup,
)


def constant_pyramid(k: int, values: List[float]) -> NeuralPyramid:
    return NeuralPyramid(
        [FeatureTexture(np.full((2**s, 2**s, 1), values[s])) for s in range(k + 1)]
    )


def point_inside_cells(rng: np.random.Generator, resolutions: List[int]) -> UV:
    while True:
        p = rng.uniform(0.0, 1.0, size=2)
        ok = True
        for res in resolutions:
            frac = np.mod(p * res - 0.5, 1.0)
            ok = ok and bool(np.all(frac > 0.01) and np.all(frac < 0.99))
        if ok:
            return (float(p[0]), float(p[1]))


class Test(TestCase):
    def test_level_of_detail(self):
        self.assertEqual(0.0, level_of_detail(1.0, 9))
        self.assertEqual(9.0, level_of_detail(2.0**-9, 9))
        self.assertAlmostEqual(8.5, level_of_detail(2.0**-8.5, 9), places=12)
        self.assertEqual(0.0, level_of_detail(4.0, 9))
        self.assertEqual(9.0, level_of_detail(2.0**-12, 9))

        with self.assertRaises(ContractViolation):
            level_of_detail(0.0, 9)

        with self.assertRaises(ContractViolation):
            level_of_detail(-0.5, 9)

    def test_monotonic_in_sigma(self):
        sigmas = np.geomspace(2.0**-10, 2.0, 200)
        levels = [level_of_detail(float(s), 9) for s in sigmas]
        self.assertTrue(all(a >= b for a, b in zip(levels, levels[1:])))

    def test_constant_pyramid(self):
        pyramid = NeuralPyramid(
            [FeatureTexture(np.full((2**s, 2**s, 2), 0.25)) for s in range(5)]
        )
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = (float(rng.uniform(-2, 2)), float(rng.uniform(-2, 2)))
            sigma = float(2.0 ** rng.uniform(-6, 1))
            np.testing.assert_allclose(
                trilinear_lookup(pyramid, p, sigma), [0.25, 0.25], atol=1e-14
            )

    def test_integer_level_equals_single_bilinear(self):
        rng = np.random.default_rng(1)
        pyramid = NeuralPyramid.random_normal(5, 3, rng, 1.0)
        p = (0.3141, 0.2718)
        np.testing.assert_array_equal(
            trilinear_lookup(pyramid, p, 2.0**-3),
            bilinear_lookup(pyramid.levels[3], p),
        )

        up = [0.5, -1.0, 2.0]
        per_level, coord = trilinear_backward(pyramid, p, 2.0**-3, up)
        expected_texels, expected_coord = bilinear_backward(pyramid.levels[3], p, up)
        np.testing.assert_allclose(coord, expected_coord, atol=1e-14)
        self.assertEqual(sorted(expected_texels), sorted(per_level[3]))
        for s, grads in enumerate(per_level):
            if s != 3:
                self.assertEqual({}, grads)

    def test_half_level_blend(self):
        pyramid = constant_pyramid(4, [0.0, 0.0, 1.0, 3.0, 0.0])
        out = trilinear_lookup(pyramid, (0.4, 0.6), 2.0**-2.5)
        self.assertAlmostEqual(2.0, out[0], places=12)

    def test_blend_bounds(self):
        rng = np.random.default_rng(2)
        pyramid = NeuralPyramid.random_normal(4, 2, rng, 1.0)
        for _ in range(50):
            p = (float(rng.uniform()), float(rng.uniform()))
            level = float(rng.uniform(0, 4))
            out = trilinear_lookup(pyramid, p, 2.0**-level)
            a = bilinear_lookup(pyramid.levels[int(np.floor(level))], p)
            b = bilinear_lookup(pyramid.levels[int(np.ceil(level))], p)
            self.assertTrue(np.all(out >= np.minimum(a, b) - 1e-12))
            self.assertTrue(np.all(out <= np.maximum(a, b) + 1e-12))

    def test_continuity_across_levels(self):
        rng = np.random.default_rng(3)
        pyramid = NeuralPyramid.random_normal(4, 3, rng, 1.0)
        p = (0.123, 0.456)
        for n in [1, 2, 3]:
            below = trilinear_lookup(pyramid, p, 2.0 ** -(n - 1e-6))
            above = trilinear_lookup(pyramid, p, 2.0 ** -(n + 1e-6))
            self.assertLess(float(np.max(np.abs(below - above))), 1e-5)

    def test_clamping(self):
        rng = np.random.default_rng(4)
        pyramid = NeuralPyramid.random_normal(3, 2, rng, 1.0)
        p = (0.7, 0.2)
        np.testing.assert_array_equal(
            trilinear_lookup(pyramid, p, 3.0), bilinear_lookup(pyramid.levels[0], p)
        )
        np.testing.assert_array_equal(
            trilinear_lookup(pyramid, p, 2.0**-3),
            bilinear_lookup(pyramid.levels[3], p),
        )
        np.testing.assert_array_equal(
            trilinear_lookup(pyramid, p, 2.0**-7),
            bilinear_lookup(pyramid.levels[3], p),
        )

    def test_constant_pyramid_has_no_coord_gradient(self):
        pyramid = constant_pyramid(3, [1.0, 2.0, 3.0, 4.0])
        _, coord = trilinear_backward(pyramid, (0.33, 0.66), 2.0**-1.7, [1.0])
        np.testing.assert_allclose(coord, [0.0, 0.0], atol=1e-12)

    def test_zero_upstream_keeps_touched_texels(self):
        rng = np.random.default_rng(9)
        pyramid = NeuralPyramid.random_normal(3, 2, rng, 1.0)
        per_level, coord = trilinear_backward(pyramid, (0.4, 0.3), 2.0**-1.5, [0, 0])
        self.assertEqual([0, 4, 4, 0], [len(grads) for grads in per_level])
        for grads in per_level:
            for g in grads.values():
                self.assertEqual([0.0, 0.0], g.tolist())
        self.assertEqual([0.0, 0.0], coord.tolist())

        per_level, _ = trilinear_backward(pyramid, (0.4, 0.3), 2.0**-2, [0, 0])
        self.assertEqual([0, 0, 4, 0], [len(grads) for grads in per_level])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = int(rng.integers(1, 4))
            pyramid = NeuralPyramid.random_normal(3, c, rng, 1.0)
            p = point_inside_cells(rng, [1, 2, 4, 8])
            sigma = float(2.0 ** -rng.uniform(0, 3))
            up = rng.normal(size=c)

            grads = [np.zeros_like(level.data) for level in pyramid.levels]
            coord = trilinear_backward_batch(
                pyramid,
                np.array([p]),
                np.array([sigma]),
                up[None, :],
                grads_out=grads,
            )[0]

            uv = np.array(p, dtype=np.float64)

            def f_coord() -> float:
                feat = trilinear_lookup(pyramid, (uv[0], uv[1]), sigma)
                return float(np.dot(feat, up))

            self.assertLess(
                relative_error(coord, numeric_gradient(f_coord, uv, eps=1e-4)), 1e-4
            )

            def f_tex() -> float:
                return float(np.dot(trilinear_lookup(pyramid, p, sigma), up))

            for level, g in zip(pyramid.levels, grads):
                numeric = numeric_gradient(f_tex, level.data, eps=1e-4)
                self.assertLess(relative_error(g, numeric), 1e-4)
