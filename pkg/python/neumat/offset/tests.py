import tempfile

import numpy as np
from expecttest import TestCase
from PIL import Image

from ..gradcheck import numeric_gradient, relative_error
from ..mlp import mlp_forward
from ..prelude import *
from ..texture import bilinear_lookup

from .offset import (
    Direction,
    OffsetModule,
    apply_offset,
    offset_backward,
    offset_from_depth,
    offset_visualization,
    ray_depth,
    write_offset_visualization,
)


def random_module(seed: int, k: int = 3, c2: int = 3) -> OffsetModule:
    rng = np.random.default_rng(seed)
    mod = OffsetModule.init(k, c2, seed, rng, texture_std=1.0)
    for b in mod.mlp.biases:
        b[:] = rng.normal(0.0, 0.3, size=b.shape)
    return mod


class Test(TestCase):
    def test_direction(self):
        d = Direction(0.6, 0.0)
        self.assertAlmostEqual(0.8, d.z, places=12)
        self.assertEqual(1.0, Direction(0.0, 0.0).z)

        with self.assertRaises(ContractViolation):
            Direction(0.8, 0.8)

        v = Direction.from_vector([0.0, 3.0, 4.0])
        self.assertAlmostEqual(0.6, v.y, places=12)
        with self.assertRaises(ContractViolation):
            Direction.from_vector([0.0, 0.5, -1.0])

    def test_zero_module(self):
        mod = OffsetModule.zeros(3, 7)
        wo = Direction(0.5, -0.3)
        self.assertEqual(0.0, ray_depth(mod, (0.2, 0.9), wo))
        self.assertEqual((0.2, 0.9), apply_offset(mod, (0.2, 0.9), wo))

    def test_offset_from_depth(self):
        straight_down = offset_from_depth(0.7, Direction(0.0, 0.0))
        self.assertEqual([0.0, 0.0], straight_down.tolist())
        zero_depth = offset_from_depth(0.0, Direction(0.5, 0.5))
        self.assertEqual([0.0, 0.0], zero_depth.tolist())

        delta = offset_from_depth(0.2, Direction(0.5, 0.0))
        self.assertAlmostEqual(0.11547, float(delta[0]), places=5)
        self.assertEqual(0.0, float(delta[1]))

        # grazing clamp: z < 0.1 divides by 0.1
        wo = Direction(0.999, 0.0)
        self.assertAlmostEqual(0.999, float(offset_from_depth(0.1, wo)[0]), places=12)

    def test_h_is_linear_and_parallel(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            radius = float(np.sqrt(rng.uniform()))
            angle = float(rng.uniform(0, 2 * np.pi))
            wo = Direction(radius * math.cos(angle), radius * math.sin(angle))
            r = float(rng.normal())
            alpha = float(rng.uniform(-3, 3))
            delta = offset_from_depth(r, wo)
            np.testing.assert_allclose(
                offset_from_depth(alpha * r, wo), alpha * delta, atol=1e-12
            )
            cross = delta[0] * wo.y - delta[1] * wo.x
            self.assertAlmostEqual(0.0, float(cross), places=12)
            self.assertGreaterEqual(float(np.dot(delta, wo.as_array())) * r, 0.0)

    def test_normal_incidence_is_identity(self):
        mod = random_module(1)
        for p in [(0.1, 0.2), (-3.7, 12.25), (0.5, 0.5)]:
            self.assertEqual(p, apply_offset(mod, p, Direction(0.0, 0.0)))

    def test_composition(self):
        mod = random_module(2)
        p = (0.31, 0.77)
        wo = Direction(0.4, -0.5)

        features = bilinear_lookup(mod.texture, p)
        out, _ = mlp_forward(mod.mlp, np.concatenate([features, wo.as_array()]))
        self.assertEqual(float(out[0]), ray_depth(mod, p, wo))

        delta = offset_from_depth(ray_depth(mod, p, wo), wo)
        self.assertEqual((p[0] + delta[0], p[1] + delta[1]), apply_offset(mod, p, wo))

    def test_backward_degenerate_cases(self):
        mod = random_module(3)
        wo = Direction(0.3, 0.2)
        tex_grad, mlp_grads = offset_backward(mod, (0.3, 0.3), wo, [0, 0])
        self.assertEqual(0.0, float(np.max(np.abs(tex_grad))))
        for _, g in mlp_grads.blocks("g"):
            self.assertEqual(0.0, float(np.max(np.abs(g))))

        tex_grad, mlp_grads = offset_backward(
            mod, (0.3, 0.3), Direction(0.0, 0.0), [1.0, -2.0]
        )
        self.assertEqual(0.0, float(np.max(np.abs(tex_grad))))
        for _, g in mlp_grads.blocks("g"):
            self.assertEqual(0.0, float(np.max(np.abs(g))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for trial in range(50):
            mod = random_module(100 + trial)
            # offset texture is 8×8; keep away from cell edges
            cell = rng.integers(0, 8, size=2)
            p = (
                float((cell[0] + 0.5 + rng.uniform(0.05, 0.95)) / 8),
                float((cell[1] + 0.5 + rng.uniform(0.05, 0.95)) / 8),
            )
            radius = float(np.sqrt(rng.uniform(0.05, 0.95)))
            angle = float(rng.uniform(0, 2 * np.pi))
            wo = Direction(radius * math.cos(angle), radius * math.sin(angle))
            up = rng.normal(size=2)

            tex_grad, mlp_grads = offset_backward(mod, p, wo, up)

            def f() -> float:
                return float(np.dot(np.array(apply_offset(mod, p, wo)), up))

            self.assertLess(
                relative_error(tex_grad, numeric_gradient(f, mod.texture.data)), 1e-4
            )
            for (_, analytic), (_, param) in zip(
                mlp_grads.blocks("g"), mod.mlp.blocks("m")
            ):
                self.assertLess(
                    relative_error(analytic, numeric_gradient(f, param)), 1e-4
                )

    def test_visualization_is_neutral_at_normal_incidence(self):
        pixels = offset_visualization(random_module(5), Direction(0.0, 0.0), 10.0)
        self.assertEqual((8, 8, 3), pixels.shape)
        self.assertEqual({(128, 128, 0)}, {tuple(px) for px in pixels.reshape(-1, 3)})

        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "offset.png")
            write_offset_visualization(path, random_module(6), Direction(0.5, 0.0), 4.0)
            with Image.open(path) as image:
                self.assertEqual((8, 8), image.size)
                self.assertEqual("RGB", image.mode)
