import os
import tempfile

import numpy as np
from expecttest import TestCase
from PIL import Image as PILImage

from ..datagen import OracleOptions, preset_heightfield
from ..material import MbtfMaterial, QueryBatch
from ..prelude import *
from ..pyramid import sigma_range

from .renderer import (
    Camera,
    Image,
    Light,
    Plane,
    QueryBuffer,
    RenderOptions,
    Scene,
    _analytic_uv_steps,
    image_export,
    image_mse,
    linear_to_srgb,
    load_scene,
    lod_sweep_scenes,
    pixel_footprint_sigma,
    pixel_footprint_sigma_batch,
    read_pfm,
    render,
    render_reference,
    swatch_queries,
    trace_plane,
    write_pfm,
)


def top_down_scene(pixels_per_tile: int, distance_scale: float = 1.0) -> Scene:
    """
    Camera straight above the tile center. At `distance_scale` 1 one tile spans the
    image.
    """
    fov = 40.0
    d = 0.5 / math.tan(math.radians(fov) / 2.0) * distance_scale
    return Scene(
        camera=Camera(
            position=np.array([0.5, 0.5, d]),
            look_at=np.array([0.5, 0.5, 0.0]),
            up=np.array([0.0, 1.0, 0.0]),
            fov_deg=fov,
            width=pixels_per_tile,
            height=pixels_per_tile,
        )
    )


def oblique_scene(width: int = 12, height: int = 10, **kwargs: Any) -> Scene:
    light = Light(
        direction=np.array([0.3, 0.2, 1.0]), irradiance=np.array([1.0, 0.8, 0.6])
    )
    kwargs.setdefault("light", light)
    return Scene(
        camera=Camera(
            position=np.array([0.5, -1.0, 1.0]),
            look_at=np.array([0.5, 0.5, 0.0]),
            fov_deg=40.0,
            width=width,
            height=height,
        ),
        **kwargs,
    )


def constant_material(k: int, value: float) -> MbtfMaterial:
    mat = MbtfMaterial.zeros(k, 3, 3)
    mat.decoder.biases[-1][:] = value
    return mat


def center_sigma(scene: Scene, k: int = 9) -> float:
    cam = scene.camera
    px = np.array([cam.width / 2.0])
    py = np.array([cam.height / 2.0])
    hits = trace_plane(scene, px, py)
    return float(pixel_footprint_sigma_batch(scene, px, py, hits.uv, k)[0])


class Test(TestCase):
    def test_footprint_fronto_parallel(self):
        sigma = center_sigma(top_down_scene(64))
        self.assertAlmostEqual(1.0, sigma / (0.5 / 64), delta=0.02)

        scene = top_down_scene(64)
        hits = trace_plane(scene, np.array([10.5]), np.array([20.5]))
        single = pixel_footprint_sigma(scene, (10, 20), hits.uv[0], 9)
        self.assertAlmostEqual(1.0, single / (0.5 / 64), delta=0.02)

    def test_footprint_scales_with_distance_and_resolution(self):
        near = center_sigma(top_down_scene(64))
        far = center_sigma(top_down_scene(64, distance_scale=2.0))
        self.assertAlmostEqual(2.0, far / near, delta=0.04)

        coarse = center_sigma(top_down_scene(32))
        self.assertAlmostEqual(2.0, coarse / near, delta=0.04)

    def test_footprint_grows_toward_the_top_of_an_oblique_view(self):
        scene = oblique_scene(width=16, height=48)
        py = np.arange(48) + 0.5
        px = np.full(48, 8.0)
        hits = trace_plane(scene, px, py)
        self.assertTrue(np.all(hits.hit))
        sigma = pixel_footprint_sigma_batch(scene, px, py, hits.uv, 9)
        self.assertTrue(np.all(np.diff(sigma) < 0))

    def test_footprint_clamped(self):
        lo, hi = sigma_range(2)
        scene = top_down_scene(64)
        self.assertEqual(lo, center_sigma(scene, k=2))

        far = top_down_scene(4, distance_scale=16.0)
        self.assertEqual(hi, center_sigma(far, k=2))

    def test_footprint_falls_back_when_offset_rays_miss(self):
        # rolled camera looking just below the horizon
        scene = Scene(
            camera=Camera(
                position=np.array([0.0, 0.0, 0.2]),
                look_at=np.array([1.0, 0.3, 0.15]),
                up=np.array([0.0, 0.5, 1.0]),
                fov_deg=60.0,
                width=32,
                height=32,
            )
        )
        rows, cols = np.mgrid[0:32, 0:32]
        px = cols.reshape(-1) + 0.5
        py = rows.reshape(-1) + 0.5
        hits = trace_plane(scene, px, py)
        right = trace_plane(scene, px + 1.0, py)
        self.assertTrue(np.any(hits.hit & ~right.hit))

        idx = np.flatnonzero(hits.hit)
        sigma = pixel_footprint_sigma_batch(scene, px[idx], py[idx], hits.uv[idx], 6)
        lo, hi = sigma_range(6)
        self.assertTrue(np.all(np.isfinite(sigma)))
        self.assertTrue(np.all((sigma >= lo) & (sigma <= hi)))

    def test_analytic_steps_match_traced_steps(self):
        scene = top_down_scene(64)
        px = np.array([5.5, 30.5])
        py = np.array([40.5, 12.5])
        step_x, step_y = _analytic_uv_steps(scene, px, py)
        base = trace_plane(scene, px, py).uv
        traced_x = trace_plane(scene, px + 1, py).uv - base
        traced_y = trace_plane(scene, px, py + 1).uv - base
        np.testing.assert_allclose(step_x, traced_x, atol=1e-12)
        np.testing.assert_allclose(step_y, traced_y, atol=1e-12)

    def test_plane_frame_directions(self):
        scene = top_down_scene(8)
        hits = trace_plane(scene, np.array([4.0]), np.array([4.0]))
        np.testing.assert_allclose(hits.uv[0], [0.5, 0.5], atol=1e-12)
        local = scene.plane.to_local(hits.view)[0]
        np.testing.assert_allclose(local, [0, 0, 1], atol=1e-12)

        tiled = dataclasses.replace(scene, plane=Plane(tiling=4.0))
        np.testing.assert_allclose(
            trace_plane(tiled, np.array([4.0]), np.array([4.0])).uv[0], [2.0, 2.0]
        )

    def test_flat_material_render(self):
        value = 0.5 / math.pi
        scene = oblique_scene(light=Light(direction=np.array([0.2, 0.1, 1.0])))
        img = render(scene, constant_material(4, value))
        np.testing.assert_allclose(img.data, value, rtol=1e-12)

    def test_batched_and_unbatched_renders_are_identical(self):
        mat = MbtfMaterial.init(3, 3, 3, 7, texture_std=0.5)
        scene = oblique_scene(spp=2, seed=4)
        reference = render(scene, mat, RenderOptions(batch_capacity=1))
        for capacity in [7, 4096]:
            img = render(scene, mat, RenderOptions(batch_capacity=capacity))
            np.testing.assert_array_equal(reference.data, img.data)

    def test_threads_do_not_change_the_image(self):
        mat = MbtfMaterial.init(3, 3, 3, 8, texture_std=0.5)
        scene = oblique_scene(width=9, height=40, spp=2, seed=1)
        single = render(scene, mat)
        threaded = render(scene, mat, RenderOptions(threads=3))
        np.testing.assert_array_equal(single.data, threaded.data)
        np.testing.assert_array_equal(single.data, render(scene, mat).data)

    def test_linear_in_irradiance(self):
        mat = MbtfMaterial.init(3, 3, 3, 9, texture_std=0.5)
        scene = oblique_scene(spp=3)
        bright = dataclasses.replace(
            scene,
            light=Light(scene.light.direction, scene.light.irradiance * 4.0),
        )
        np.testing.assert_array_equal(
            render(scene, mat).data * 4.0, render(bright, mat).data
        )

    def test_indirect_bounce_adds_environment_light(self):
        value = 0.5 / math.pi
        mat = constant_material(3, value)
        scene = oblique_scene(
            indirect=True, env_radiance=np.array([0.5, 0.5, 0.5]), spp=2
        )
        direct_only = render(dataclasses.replace(scene, indirect=False), mat)
        with_bounce = render(scene, mat)
        # constant reflectance under constant radiance L gathers value · L · π
        np.testing.assert_allclose(
            with_bounce.data - direct_only.data, value * 0.5 * math.pi, rtol=1e-9
        )

    def test_reference_render_of_flat_heightfield(self):
        hf = preset_heightfield("flat", 32)
        scene = oblique_scene(width=6, height=5)
        scene.light.irradiance = np.ones(3)
        img = render_reference(scene, hf, 4, oracle=OracleOptions(n_samples=4))
        np.testing.assert_allclose(img.data, 0.5 / math.pi, rtol=1e-12)

    def test_reference_render_ignores_batch_capacity(self):
        hf = preset_heightfield("bumps", 32)
        scene = oblique_scene(
            width=5,
            height=4,
            spp=2,
            indirect=True,
            env_radiance=np.array([0.2, 0.2, 0.2]),
        )
        oracle = OracleOptions(n_samples=3)
        images = [
            render_reference(
                scene, hf, 4, RenderOptions(batch_capacity=capacity), oracle
            ).data
            for capacity in [1, 7, 4096]
        ]
        self.assertGreater(float(np.std(images[0])), 0.0)
        np.testing.assert_array_equal(images[0], images[1])
        np.testing.assert_array_equal(images[0], images[2])

    def test_query_buffer_passes_keys(self):
        out = np.zeros((3, 3))
        seen: List[List[int]] = []

        def shade(batch: QueryBatch, keys: IntArray) -> FloatArray:
            seen.append(keys[:, 0].tolist())
            return np.zeros((len(batch), 3))

        buffer = QueryBuffer(shade, out, 2)
        batch = QueryBatch(
            uv=np.zeros((3, 2)),
            sigma=np.full(3, 0.1),
            wi=np.zeros((3, 2)),
            wo=np.zeros((3, 2)),
        )
        buffer.push(batch, np.ones(3), np.arange(3), np.array([[5], [6], [7]]))
        buffer.push(batch.take(slice(0, 1)), np.ones(3), np.arange(1), np.array([[8]]))
        buffer.flush()
        self.assertEqual([[5, 6], [7, 8]], seen)

    def test_query_buffer_drains(self):
        out = np.zeros((4, 3))
        seen: List[int] = []

        def shade(batch: QueryBatch, keys: IntArray) -> FloatArray:
            seen.append(len(batch))
            return np.ones((len(batch), 3))

        buffer = QueryBuffer(shade, out, 4)
        n = 10
        batch = QueryBatch(
            uv=np.zeros((n, 2)),
            sigma=np.full(n, 0.1),
            wi=np.zeros((n, 2)),
            wo=np.zeros((n, 2)),
        )
        buffer.push(batch, np.array([1.0, 2.0, 3.0]), np.arange(n) % 4)
        self.assertEqual([4, 4], seen)
        self.assertEqual(2, buffer.pending())
        buffer.flush()
        self.assertEqual([4, 4, 2], seen)
        self.assertEqual([3.0, 6.0, 9.0], out[0].tolist())
        self.assertEqual([2.0, 4.0, 6.0], out[3].tolist())

        with self.assertRaises(ConfigError):
            QueryBuffer(shade, out, 0)

    def test_image_mse(self):
        a = Image.zeros(4, 3)
        self.assertEqual(0.0, image_mse(a, a))
        b = Image(np.full((3, 4, 3), 0.1))
        self.assertAlmostEqual(0.01, image_mse(a, b), places=15)
        with self.assertRaises(ShapeMismatchError):
            image_mse(a, Image.zeros(3, 4))

    def test_srgb(self):
        self.assertEqual(188, int(np.round(linear_to_srgb(np.array(0.5)) * 255)))
        img = Image(np.array([[[0.0, 0.5, 2.0]]]))
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "out.png")
            image_export(img, path)
            with PILImage.open(path) as png:
                self.assertEqual((0, 188, 255), png.getpixel((0, 0)))

    def test_pfm_round_trip(self):
        rng = np.random.default_rng(2)
        data = rng.uniform(0.0, 3.0, size=(3, 5, 3))
        data = data.astype(np.float32).astype(np.float64)
        img = Image(data)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "out.pfm")
            write_pfm(img, path)
            with open(path, "rb") as f:
                raw = f.read()
            self.assertEqual(b"PF\n5 3\n-1.0\n", raw[:12])
            # the first stored row is the bottom one
            first = np.frombuffer(raw[12:24], dtype="<f4")
            np.testing.assert_array_equal(first, data[2, 0])
            np.testing.assert_array_equal(read_pfm(path).data, data)

            with open(path, "wb") as f:
                f.write(raw[:-4])
            with self.assertRaises(TruncatedFileError):
                read_pfm(path)

            with self.assertRaises(InputError):
                image_export(img, os.path.join(d, "out.bmp"))

    def test_load_scene(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "scene.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write(
                    "# test scene\n"
                    "camera.position = 0.5, -1, 1\n"
                    "camera.look_at = 0.5 0.5 0\n"
                    "camera.width = 32\n"
                    "camera.height = 24\n"
                    "light.direction = 0 0 1\n"
                    "plane.tiling = 2\n"
                    "material = flat.neumat\n"
                    "spp = 4\n"
                    "indirect = yes\n"
                )
            scene = load_scene(path)
            self.assertEqual(32, scene.camera.width)
            self.assertEqual(24, scene.camera.height)
            self.assertEqual(2.0, scene.plane.tiling)
            self.assertEqual(4, scene.spp)
            self.assertTrue(scene.indirect)
            self.assertEqual(os.path.join(d, "flat.neumat"), scene.material)
            self.assertEqual([0.0, 0.0, 1.0], scene.camera.up.tolist())

            with open(path, "a", encoding="utf-8") as f:
                f.write("camera.zoom = 2\n")
            with self.assertRaises(ConfigError) as cm:
                load_scene(path)
            self.assertEqual(11, cm.exception.val("line"))

            with open(path, "w", encoding="utf-8") as f:
                f.write("camera.position = 0 0 -1\ncamera.look_at = 0 0 -2\n")
            with self.assertRaises(ConfigError):
                load_scene(path)

    def test_lod_sweep_and_swatch(self):
        scene = top_down_scene(16)
        scenes = lod_sweep_scenes(scene, 4)
        self.assertEqual(4, len(scenes))
        heights = [s.camera.position[2] for s in scenes]
        for a, b in zip(heights, heights[1:]):
            self.assertAlmostEqual(2.0, b / a, places=12)

        batch = swatch_queries(3, 8, (0.1, 0.2), (0.0, 0.3))
        self.assertEqual(64, len(batch))
        self.assertEqual({0.125}, set(batch.sigma.tolist()))
        batch.validate()
