import os
import tempfile

import numpy as np
from expecttest import TestCase

from ..datagen import (
    Heightfield,
    OracleOptions,
    QueryDataset,
    preset_heightfield,
    sample_queries,
)
from ..gradcheck import numeric_gradient, relative_error
from ..material import (
    MbtfMaterial,
    QueryBatch,
    evaluate_batch,
    load_material,
    sample_cosine,
)
from ..offset import ray_depth_batch
from ..prelude import *

from .trainer import (
    Adam,
    TrainConfig,
    batch_loss,
    blur_sigma,
    blurred_view,
    checkpoint_paths,
    compute_gradients,
    dataset_max_relative_error,
    dataset_mse,
    dataset_mse_by_level,
    load_optimizer,
    loss,
    save_optimizer,
    train,
)


def synthetic_dataset(
    rng: np.random.Generator, k: int, n: int, value: float = 0.2
) -> QueryDataset:
    uv = rng.uniform(0.0, 1.0, size=(n, 2))
    sigma = 2.0 ** rng.uniform(-(k + 1), 0.0, size=n)
    wi, _ = sample_cosine(rng, n)
    wo, _ = sample_cosine(rng, n)
    shade = np.stack(
        [np.sin(2 * np.pi * uv[:, 0]), np.cos(2 * np.pi * uv[:, 1]), wo[:, 0]], axis=1
    )
    rgb = value * (1.0 + 0.5 * shade)
    records = np.concatenate([uv, sigma[:, None], wi * 0.9, wo * 0.9, rgb], axis=1)
    return QueryDataset(k=k, records=records)


def small_config(**kwargs: Any) -> TrainConfig:
    config = TrainConfig(
        batch_size=32, iterations=10, channels=3, offset_channels=3, log_every=1000
    )
    return dataclasses.replace(config, **kwargs)


def assert_same_material(a: MbtfMaterial, b: MbtfMaterial) -> None:
    blocks_a = a.param_blocks()
    blocks_b = b.param_blocks()
    assert [name for name, _ in blocks_a] == [name for name, _ in blocks_b]
    for (name, x), (_, y) in zip(blocks_a, blocks_b):
        np.testing.assert_array_equal(x, y, err_msg=name)


class Test(TestCase):
    def test_loss(self):
        self.assertEqual(1.0, loss([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]))
        self.assertEqual(0.0, loss([0.2, 0.4, 0.6], [0.2, 0.4, 0.6]))
        self.assertAlmostEqual(
            4.0 / 3.0, loss([2.0, 0.0, 0.0], [0.0, 0.0, 0.0]), places=12
        )
        pred = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        self.assertAlmostEqual(
            1.0 / 6.0, batch_loss(pred, np.zeros((2, 3))), places=12
        )

    def test_blur_schedule(self):
        self.assertEqual(8.0, blur_sigma(0))
        self.assertEqual(4.0, blur_sigma(3333))
        self.assertEqual(2.0, blur_sigma(6666))
        self.assertEqual(0.0, blur_sigma(30000))
        self.assertEqual(0.0, blur_sigma(10, sigma_init=0.05))

        previous = blur_sigma(0)
        for t in range(0, 40000, 500):
            current = blur_sigma(t)
            self.assertLessEqual(current, previous)
            self.assertTrue(current == 0.0 or current >= 0.1)
            previous = current

        with self.assertRaises(ContractViolation):
            blur_sigma(-1)

    def test_config_validation(self):
        small_config().validate()
        with self.assertRaises(ConfigError):
            small_config(batch_size=0).validate()
        with self.assertRaises(ConfigError):
            small_config(learning_rate=-1e-3).validate()
        with self.assertRaises(ConfigError):
            small_config(threads=0).validate()

    def test_adam_first_step(self):
        p = np.array([1.0, -2.0, 0.5])
        opt = Adam(lr=0.1)
        opt.step([("p", p)], [("p", np.array([3.0, -0.5, 0.0]))])
        # a bias-corrected first step moves each coordinate by lr against its gradient
        np.testing.assert_allclose(p, [0.9, -1.9, 0.5], atol=1e-6)
        self.assertEqual(1, opt.t)

    def test_zero_learning_rate_leaves_parameters(self):
        rng = np.random.default_rng(1)
        dataset = synthetic_dataset(rng, 2, 200)
        config = small_config(learning_rate=0.0, iterations=5, seed=3)
        result = train(dataset, config)
        mean = np.mean(dataset.targets, axis=0)
        expected = MbtfMaterial.init_for_training(2, 3, 3, 3, mean)
        assert_same_material(result.material, expected)
        self.assertEqual(5, len(result.losses))

    def test_zero_iterations(self):
        rng = np.random.default_rng(2)
        dataset = synthetic_dataset(rng, 2, 100)
        result = train(dataset, small_config(iterations=0, seed=9))
        mean = np.mean(dataset.targets, axis=0)
        start = MbtfMaterial.init_for_training(2, 3, 3, 9, mean)
        assert_same_material(result.material, start)
        self.assertEqual([], result.losses)
        self.assertAlmostEqual(
            dataset_mse(result.material, dataset), result.final_mse, places=12
        )

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        dataset = synthetic_dataset(rng, 2, 8, value=0.3)
        batch = dataset.queries
        targets = dataset.targets

        for sigma_blur in [0.0, 0.3]:
            mat = MbtfMaterial.init(2, 3, 3, 5, texture_std=0.5)
            _, grads = compute_gradients(mat, batch, targets, sigma_blur)
            analytic = dict(grads.blocks())

            def f() -> float:
                return compute_gradients(mat, batch, targets, sigma_blur)[0]

            checked = [
                "pyramid.0",
                "pyramid.1",
                "pyramid.2",
                "decoder.w0",
                "decoder.b3",
                "offset.texture",
                "offset.mlp.w0",
                "offset.mlp.b3",
            ]
            params = dict(mat.param_blocks())
            for name in checked:
                numeric = numeric_gradient(f, params[name])
                self.assertLess(
                    relative_error(analytic[name], numeric), 1e-4, msg=name
                )

    def test_blurred_view_skips_small_levels(self):
        mat = MbtfMaterial.init(3, 2, 2, 0)
        view, blurred, offset_blurred = blurred_view(mat, 1.0)
        # support is 7 texels, so only the 8×8 textures are blurred
        self.assertEqual([False, False, False, True], blurred)
        self.assertTrue(offset_blurred)
        np.testing.assert_array_equal(
            view.pyramid.levels[2].data, mat.pyramid.levels[2].data
        )
        self.assertIs(view.decoder, mat.decoder)

        same, blurred, offset_blurred = blurred_view(mat, 0.0)
        self.assertIs(same, mat)
        self.assertFalse(any(blurred) or offset_blurred)

    def test_training_start(self):
        rng = np.random.default_rng(4)
        dataset = synthetic_dataset(rng, 2, 300)
        mean = np.mean(dataset.targets, axis=0)
        start = MbtfMaterial.init_for_training(2, 3, 3, 2, mean)
        rgb = evaluate_batch(start, dataset.queries)
        np.testing.assert_allclose(rgb, np.broadcast_to(mean, rgb.shape), rtol=1e-6)
        assert start.offset is not None
        r, _ = ray_depth_batch(start.offset, dataset.queries.uv, dataset.queries.wo)
        self.assertEqual(0.0, float(np.max(np.abs(r))))

        # the last layers move first; everything else follows once they are nonzero
        one = train(dataset, small_config(iterations=1, seed=2)).material
        moved = {
            name
            for (name, a), (_, b) in zip(start.param_blocks(), one.param_blocks())
            if not np.array_equal(a, b)
        }
        self.assertEqual({"decoder.w3", "decoder.b3"}, moved)

        three = train(dataset, small_config(iterations=3, seed=2)).material
        before = dict(start.param_blocks())
        for name, after in three.param_blocks():
            self.assertFalse(np.array_equal(before[name], after), msg=name)

    def test_loss_decreases(self):
        rng = np.random.default_rng(5)
        dataset = synthetic_dataset(rng, 2, 500, value=0.25)
        config = small_config(iterations=100, learning_rate=1e-2, batch_size=64)
        result = train(dataset, config)
        first = float(np.mean(result.losses[:10]))
        last = float(np.mean(result.losses[-10:]))
        self.assertLess(last, first)
        self.assertLess(result.final_mse, first)

    def test_baseline_training_has_no_offset(self):
        rng = np.random.default_rng(6)
        dataset = synthetic_dataset(rng, 2, 100)
        result = train(dataset, small_config(iterations=3, baseline_only=True))
        self.assertFalse(result.material.has_offset)

    def test_deterministic_runs(self):
        rng = np.random.default_rng(7)
        dataset = synthetic_dataset(rng, 2, 200)
        a = train(dataset, small_config(iterations=4, seed=1))
        b = train(dataset, small_config(iterations=4, seed=1))
        assert_same_material(a.material, b.material)
        self.assertEqual(a.losses, b.losses)

        threaded = small_config(iterations=4, seed=1, threads=3, deterministic=True)
        c = train(dataset, threaded)
        d = train(dataset, threaded)
        assert_same_material(c.material, d.material)
        # same parameters at the first step, only the summation order differs
        self.assertAlmostEqual(a.losses[0], c.losses[0], delta=1e-12 * a.losses[0])

    def test_loss_log(self):
        rng = np.random.default_rng(8)
        dataset = synthetic_dataset(rng, 2, 100)
        with tempfile.TemporaryDirectory() as d:
            log_path = os.path.join(d, "loss.tsv")
            result = train(dataset, small_config(iterations=5), log_path=log_path)
            with open(log_path, encoding="utf-8") as f:
                lines = f.read().splitlines()

        self.assertEqual(5, len(lines))
        for t, line in enumerate(lines):
            fields = line.split("\t")
            self.assertEqual(3, len(fields))
            self.assertEqual(str(t), fields[0])
            self.assertAlmostEqual(result.losses[t], float(fields[1]), places=6)
            self.assertAlmostEqual(blur_sigma(t), float(fields[2]), places=4)

    def test_checkpoint_and_resume(self):
        rng = np.random.default_rng(9)
        dataset = synthetic_dataset(rng, 2, 200)
        straight = train(dataset, small_config(iterations=6, seed=4))

        with tempfile.TemporaryDirectory() as d:
            ckpt = os.path.join(d, "ckpt.neumat")
            log_path = os.path.join(d, "loss.tsv")
            train(
                dataset,
                small_config(iterations=4, seed=4, checkpoint_every=2),
                checkpoint_path=ckpt,
                log_path=log_path,
            )
            mat_path, opt_path = checkpoint_paths(ckpt)
            self.assertTrue(os.path.exists(opt_path))
            self.assertEqual(4, load_material(mat_path).provenance.iterations)

            resumed = train(
                dataset,
                small_config(iterations=6, seed=4),
                resume=ckpt,
                log_path=log_path,
            )
            with open(log_path, encoding="utf-8") as f:
                steps = [int(line.split("\t")[0]) for line in f]

        self.assertEqual([0, 1, 2, 3, 4, 5], steps)
        self.assertEqual(2, len(resumed.losses))
        self.assertEqual(straight.losses[4:], resumed.losses)
        assert_same_material(straight.material, resumed.material)
        self.assertEqual(6, resumed.material.provenance.iterations)

    def test_optimizer_state_file(self):
        mat = MbtfMaterial.init(1, 2, 2, 0)
        rng = np.random.default_rng(10)
        opt = Adam()
        grads = [(name, rng.normal(size=p.shape)) for name, p in mat.param_blocks()]
        opt.step(mat.param_blocks(), grads)

        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "state.nopt")
            save_optimizer(opt, path)
            restored = Adam()
            load_optimizer(restored, path, mat.param_blocks())
            self.assertEqual(1, restored.t)
            for name in opt.m:
                np.testing.assert_array_equal(opt.m[name], restored.m[name])
                np.testing.assert_array_equal(opt.v[name], restored.v[name])

            other = MbtfMaterial.init(1, 3, 2, 0)
            with self.assertRaises(FormatError):
                load_optimizer(Adam(), path, other.param_blocks())

            with open(path, "r+b") as f:
                f.write(b"XXXX")
            with self.assertRaises(BadMagicError):
                load_optimizer(Adam(), path, mat.param_blocks())

    def test_divergence_is_reported(self):
        rng = np.random.default_rng(11)
        dataset = synthetic_dataset(rng, 2, 50, value=1e200)
        with np.errstate(all="ignore"):
            with self.assertRaises(TrainingDivergedError) as cm:
                train(dataset, small_config(iterations=3))
        self.assertEqual(0, cm.exception.val("iteration"))

    def test_empty_dataset(self):
        dataset = QueryDataset(k=2, records=np.zeros((0, 10)))
        with self.assertRaises(InputError):
            train(dataset, small_config())

    def test_mse_by_level(self):
        rng = np.random.default_rng(12)
        dataset = synthetic_dataset(rng, 3, 400, value=0.3)
        mat = MbtfMaterial.init(3, 3, 3, 0)
        rows = dataset_mse_by_level(mat, dataset)
        self.assertEqual([0, 1, 2, 3], [row.level for row in rows])
        self.assertEqual(len(dataset), sum(row.count for row in rows))
        total = sum(row.mse * row.count for row in rows if row.count > 0)
        self.assertAlmostEqual(
            dataset_mse(mat, dataset), total / len(dataset), places=12
        )

        only = dataset_mse_by_level(mat, dataset, [2])
        self.assertEqual([2], [row.level for row in only])
        self.assertEqual(0.25, only[0].sigma)
        with self.assertRaises(ConfigError):
            dataset_mse_by_level(mat, dataset, [4])

    def test_max_relative_error(self):
        dataset = synthetic_dataset(np.random.default_rng(14), 2, 300)
        zeros = MbtfMaterial.zeros(2, 3, 3)
        self.assertEqual(1.0, dataset_max_relative_error(zeros, dataset))
        self.assertEqual(
            1.0, dataset_max_relative_error(zeros, dataset, chunk_records=7)
        )

        empty = QueryDataset(k=2, records=np.zeros((0, 10)))
        with self.assertRaises(InputError):
            dataset_max_relative_error(zeros, empty)

    def test_flat_lambertian_is_reproduced(self):
        hf = preset_heightfield("flat", 16)
        dataset = sample_queries(hf, 2, 16, seed=1, options=OracleOptions(n_samples=2))
        config = small_config(
            iterations=50, batch_size=64, channels=7, offset_channels=7
        )
        result = train(dataset, config)
        self.assertLess(result.final_mse, 1e-4)

        rng = np.random.default_rng(13)
        n = 4000
        wi, _ = sample_cosine(rng, n)
        wo, _ = sample_cosine(rng, n)
        batch = QueryBatch(
            uv=rng.uniform(0.0, 1.0, size=(n, 2)),
            sigma=2.0 ** rng.uniform(-3.0, 0.0, size=n),
            wi=wi,
            wo=wo,
        )
        expected = 0.5 / np.pi
        rgb = evaluate_batch(result.material, batch)
        self.assertLess(float(np.max(np.abs(rgb - expected))) / expected, 0.05)
        self.assertLess(dataset_max_relative_error(result.material, dataset), 0.05)

        # no parallax on a flat surface, so the learned ray depth stays at zero
        assert result.material.offset is not None
        r, _ = ray_depth_batch(result.material.offset, batch.uv, batch.wo)
        self.assertLess(float(np.median(np.abs(r))), 0.01)

    def test_neural_offset_helps_on_parallax(self):
        step = preset_heightfield("step", 32)
        tall = Heightfield(step.heights * 6.0, step.albedo)
        options = OracleOptions(jitter_deg=0.0, n_samples=4)
        dataset = sample_queries(tall, 3, 64, seed=2, options=options)

        config = small_config(
            iterations=1000,
            batch_size=512,
            learning_rate=5e-3,
            blur_sigma_init=0.0,
            channels=4,
            offset_channels=4,
            seed=3,
        )
        full = train(dataset, config)
        baseline = train(dataset, dataclasses.replace(config, baseline_only=True))
        self.assertLess(full.final_mse, baseline.final_mse)
