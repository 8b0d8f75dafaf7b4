import struct
import tempfile

import numpy as np
from expecttest import TestCase
from PIL import Image

from ..material import sample_cosine
from ..offset import Direction
from ..prelude import *

from .datagen import (
    DatasetWriter,
    Heightfield,
    OracleOptions,
    QueryDataset,
    btf_eval_oracle,
    btf_eval_oracle_batch,
    dataset_iter,
    dataset_read,
    dataset_write,
    heightfield_intersect,
    load_heightfield_png,
    mbtf_oracle,
    preset_heightfield,
    read_dataset_header,
    record_count,
    sample_queries,
)

NO_JITTER = OracleOptions(jitter_deg=0.0)


def random_records(rng: np.random.Generator, n: int) -> FloatArray:
    wi, _ = sample_cosine(rng, n)
    wo, _ = sample_cosine(rng, n)
    records = np.concatenate(
        [
            rng.uniform(0, 1, size=(n, 2)),
            rng.uniform(0.01, 0.5, size=(n, 1)),
            wi,
            wo,
            rng.uniform(0, 0.5, size=(n, 3)),
        ],
        axis=1,
    )
    return records.astype(np.float32).astype(np.float64)


def brute_force_hit(hf: Heightfield, origin: FloatArray, d: FloatArray) -> FloatArray:
    dt = 0.025 / hf.resolution
    t = np.arange(0, 4.0, dt)
    points = origin[None, :] + t[:, None] * d[None, :]
    gap = points[:, 2] - hf.height_at(points[:, :2])
    first = int(np.argmax(gap <= 0))
    return points[first, :2]


class Test(TestCase):
    def test_flat_intersections(self):
        hf = preset_heightfield("flat", 32)
        hit = heightfield_intersect(hf, [0.3, 0.7, 0.5], [0.0, 0.0, -1.0])
        self.assertAlmostEqual(0.3, hit.uv[0], places=12)
        self.assertAlmostEqual(0.7, hit.uv[1], places=12)
        self.assertEqual([0.0, 0.0, 1.0], hit.normal.tolist())

        hit = heightfield_intersect(hf, [0.3, 0.7, 0.2], [1.0, 0.0, -1.0])
        self.assertAlmostEqual(0.5, hit.uv[0], places=6)
        self.assertAlmostEqual(0.7, hit.uv[1], places=12)
        self.assertAlmostEqual(0.0, hit.height, places=6)

        with self.assertRaises(ContractViolation):
            heightfield_intersect(hf, [0.3, 0.7, 0.2], [1.0, 0.0, 0.5])

    def test_ramp_matches_fine_march(self):
        hf = preset_heightfield("ramp", 64)
        rng = np.random.default_rng(0)
        for _ in range(20):
            origin = np.array([rng.uniform(), rng.uniform(), 0.08])
            angle = rng.uniform(0, 2 * np.pi)
            d = np.array([np.cos(angle), np.sin(angle), -rng.uniform(0.2, 1.0)])
            d /= np.linalg.norm(d)
            hit = heightfield_intersect(hf, origin, d)
            expected = brute_force_hit(hf, origin, d)
            error = np.abs((np.array(hit.uv) - expected + 0.5) % 1.0 - 0.5)
            self.assertLess(float(np.max(error)), 0.5 / hf.resolution)

    def test_flat_oracle_is_lambertian(self):
        hf = preset_heightfield("flat", 16)
        rng = np.random.default_rng(1)
        n = 500
        wi, _ = sample_cosine(rng, n)
        wo, _ = sample_cosine(rng, n)
        uv = rng.uniform(-1, 2, size=(n, 2))
        for options in [NO_JITTER, OracleOptions()]:
            out = btf_eval_oracle_batch(hf, uv, wi, wo, rng, options)
            self.assertEqual({0.5 / np.pi}, set(out.reshape(-1).tolist()))

    def test_flat_oracle_ignores_position_and_kernel(self):
        hf = preset_heightfield("flat", 16)
        rng = np.random.default_rng(2)
        wi = Direction(0.3, -0.4)
        wo = Direction(-0.6, 0.1)
        for p, sigma in [((0.1, 0.1), 0.0), ((0.9, 0.2), 0.3), ((5.5, -2.0), 1.0)]:
            out = mbtf_oracle(hf, p, sigma, wi, wo, 16, rng, NO_JITTER)
            np.testing.assert_allclose(out, np.full(3, 0.5 / np.pi), rtol=1e-14)

    def test_step_shadow(self):
        hf = preset_heightfield("step", 64)
        rng = np.random.default_rng(3)
        # floor just right of the wall at u = 0.75, light from the -u side
        p = (0.8, 0.5)
        shadowed = None
        for elevation_deg in [60, 50, 30, 20, 10, 5]:
            z = math.sin(math.radians(elevation_deg))
            wi = Direction(-math.sqrt(1 - z * z), 0.0)
            out = btf_eval_oracle(hf, p, wi, Direction(0.0, 0.0), rng, NO_JITTER)
            if shadowed is None:
                self.assertTrue(bool(np.all(out > 0)))
            is_dark = bool(np.all(out == 0))
            if shadowed:
                self.assertTrue(is_dark)
            shadowed = shadowed or is_dark
        self.assertTrue(shadowed)

        lit = btf_eval_oracle(
            hf, p, Direction(0.5, 0.0), Direction(0.0, 0.0), rng, NO_JITTER
        )
        np.testing.assert_allclose(lit, np.full(3, 0.3 / np.pi), atol=1e-12)

    def test_oracle_is_non_negative(self):
        for name in ["step", "ramp", "bumps"]:
            hf = preset_heightfield(name, 32)
            rng = np.random.default_rng(4)
            n = 300
            wi, _ = sample_cosine(rng, n)
            wo, _ = sample_cosine(rng, n)
            out = btf_eval_oracle_batch(
                hf, rng.uniform(0, 1, size=(n, 2)), wi, wo, rng, NO_JITTER
            )
            self.assertTrue(bool(np.all(np.isfinite(out))))
            self.assertTrue(bool(np.all(out >= 0)))

    def test_monte_carlo_self_consistency(self):
        hf = preset_heightfield("bumps", 32)
        wi = np.array([[0.4, 0.3]])
        wo = np.array([[-0.2, 0.5]])
        p = np.array([[0.37, 0.61]])
        sigma = 0.05

        rng = np.random.default_rng(5)
        positions = p + rng.normal(0.0, sigma, size=(4096, 2))
        samples = btf_eval_oracle_batch(
            hf, positions, np.repeat(wi, 4096, 0), np.repeat(wo, 4096, 0), rng
        )
        big = samples.mean(axis=0)
        sd = samples.std(axis=0)

        small = mbtf_oracle(
            hf,
            (0.37, 0.61),
            sigma,
            Direction(0.4, 0.3),
            Direction(-0.2, 0.5),
            64,
            np.random.default_rng(6),
        )
        bound = 3 * sd * math.sqrt(1 / 64 + 1 / 4096) + 1e-12
        self.assertTrue(bool(np.all(np.abs(small - big) <= bound)))

    def test_checker_whole_tile_average(self):
        hf = preset_heightfield("checker", 64)
        rng = np.random.default_rng(7)
        out = mbtf_oracle(
            hf,
            (0.5, 0.5),
            1.0,
            Direction(0.0, 0.0),
            Direction(0.0, 0.0),
            100_000,
            rng,
            NO_JITTER,
        )
        np.testing.assert_allclose(out, np.full(3, 0.5 / np.pi), atol=2e-3)

    def test_indirect_adds_light_in_cavities(self):
        hf = preset_heightfield("step", 32)
        n = 2000
        uv = np.tile([[0.77, 0.5]], (n, 1))
        wi = np.tile([[0.6, 0.0]], (n, 1))
        wo = np.zeros((n, 2))
        direct = btf_eval_oracle_batch(
            hf, uv, wi, wo, np.random.default_rng(8), NO_JITTER
        )
        both = btf_eval_oracle_batch(
            hf, uv, wi, wo, np.random.default_rng(8), OracleOptions(0.0, indirect=True)
        )
        self.assertGreater(float(both.mean()), float(direct.mean()))

    def test_specular_lobe(self):
        flat = preset_heightfield("flat", 16)
        shiny = Heightfield(flat.heights, flat.albedo, np.full((16, 16), 0.3))
        rng = np.random.default_rng(9)
        wi = Direction(0.3, 0.0)
        p = (0.5, 0.5)
        mirror = btf_eval_oracle(shiny, p, wi, Direction(-0.3, 0.0), rng, NO_JITTER)
        away = btf_eval_oracle(shiny, p, wi, Direction(0.3, 0.0), rng, NO_JITTER)
        self.assertGreater(float(mirror[0]), float(away[0]))
        self.assertGreater(float(away[0]), 0.5 / np.pi)

    def test_sample_queries(self):
        self.assertEqual(1_048_576, record_count(6, 256))
        self.assertEqual(65_536, record_count(4, 256))

        hf = preset_heightfield("flat", 16)
        options = OracleOptions(n_samples=2)
        a = sample_queries(hf, 2, 300, seed=1, options=options)
        self.assertEqual(4800, len(a))

        q = a.queries
        self.assertTrue(bool(np.all(q.sigma >= 2.0**-3 * (1 - 1e-6))))
        self.assertTrue(bool(np.all(q.sigma <= 0.5 * (1 + 1e-6))))
        self.assertTrue(bool(np.all(np.sum(q.wi**2, axis=1) <= 1 + 1e-6)))
        self.assertTrue(bool(np.all((q.uv >= 0) & (q.uv <= 1))))
        np.testing.assert_allclose(a.targets, 0.5 / np.pi, rtol=1e-6)

        b = sample_queries(hf, 2, 300, seed=1, options=options, threads=3)
        np.testing.assert_array_equal(a.records, b.records)

        c = sample_queries(hf, 2, 300, seed=2, options=options)
        self.assertFalse(np.array_equal(a.records, c.records))

    def test_same_seed_gives_identical_files(self):
        hf = preset_heightfield("step", 16)
        options = OracleOptions(n_samples=2)
        with tempfile.TemporaryDirectory() as d:
            paths = [os.path.join(d, f"{i}.mbtfq") for i in range(2)]
            for path in paths:
                dataset_write(sample_queries(hf, 1, 8, seed=3, options=options), path)
            self.assertEqual(sha256_file(paths[0]), sha256_file(paths[1]))
            self.assertEqual(24 + 32 * 48, os.path.getsize(paths[0]))

    def test_dataset_round_trip(self):
        rng = np.random.default_rng(10)
        ds = QueryDataset(k=5, records=random_records(rng, 10_000), flags=1)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "ds.mbtfq")
            dataset_write(ds, path)
            loaded = dataset_read(path)
            self.assertEqual(5, loaded.k)
            self.assertEqual(1, loaded.flags)
            np.testing.assert_array_equal(ds.records, loaded.records)

            chunks = list(dataset_iter(path, chunk_records=3000))
            self.assertEqual([3000, 3000, 3000, 1000], [len(c) for c in chunks])
            np.testing.assert_array_equal(ds.records, np.concatenate(chunks))

    def test_external_file(self):
        records = random_records(np.random.default_rng(11), 3)
        raw = b"MBTQ" + struct.pack("<IIQI", 1, 4, 3, 0)
        for rec in records:
            raw += struct.pack("<12f", *rec.tolist(), 0.0, 0.0)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "ext.mbtfq")
            with open(path, "wb") as f:
                f.write(raw)
            header = read_dataset_header(path)
            self.assertEqual((4, 3, 0), (header.k, header.count, header.flags))
            np.testing.assert_array_equal(records, dataset_read(path).records)

    def test_dataset_errors(self):
        rng = np.random.default_rng(12)
        records = random_records(rng, 10)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "ds.mbtfq")

            bad = records.copy()
            bad[3, 8] = np.nan
            with self.assertRaises(NonFiniteValueError):
                dataset_write(QueryDataset(k=2, records=bad), path)
            self.assertFalse(os.path.exists(path))

            bad = records.copy()
            bad[4, 9] = -0.5
            with self.assertRaises(InvalidRecordError):
                dataset_write(QueryDataset(k=2, records=bad), path)

            dataset_write(QueryDataset(k=2, records=records), path)
            with open(path, "rb") as f:
                good = f.read()

            def read_bytes(b: bytes) -> QueryDataset:
                with open(path, "wb") as f:
                    f.write(b)
                return dataset_read(path)

            with self.assertRaises(BadMagicError):
                read_bytes(b"MBTX" + good[4:])
            with self.assertRaises(VersionMismatchError):
                read_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
            with self.assertRaises(TruncatedFileError):
                read_bytes(good[:-10])
            with self.assertRaises(FormatError):
                read_bytes(good + b"\x00" * 48)

            nan = np.array([np.nan], dtype="<f4").tobytes()
            offset = 24 + 48 * 2 + 4 * 7
            with self.assertRaises(NonFiniteValueError):
                read_bytes(good[:offset] + nan + good[offset + 4 :])

            reserved = 24 + 48 * 2 + 4 * 10
            one = np.array([1.0], dtype="<f4").tobytes()
            with self.assertRaises(InvalidRecordError):
                read_bytes(good[:reserved] + one + good[reserved + 4 :])

    def test_writer_counts_streamed_records(self):
        rng = np.random.default_rng(13)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "ds.mbtfq")
            with DatasetWriter(path, 3, 0) as w:
                w.write(random_records(rng, 5))
                w.write(random_records(rng, 7))
            self.assertEqual(12, read_dataset_header(path).count)

    def test_load_heightfield_png(self):
        heights = np.zeros((8, 8), dtype=np.uint16)
        heights[0, :] = 65535
        albedo = np.full((8, 8, 3), 188, dtype=np.uint8)
        with tempfile.TemporaryDirectory() as d:
            hpath = os.path.join(d, "h.png")
            apath = os.path.join(d, "a.png")
            Image.fromarray(heights).save(hpath)
            Image.fromarray(albedo).save(apath)
            hf = load_heightfield_png(hpath, apath, height_scale=0.1)

        self.assertEqual(8, hf.resolution)
        # the top image row is the largest v
        self.assertAlmostEqual(0.1, float(hf.heights[7, 0]), places=12)
        self.assertEqual(0.0, float(hf.heights[0, 0]))
        self.assertAlmostEqual(0.5, float(hf.albedo[0, 0, 0]), places=2)

        with self.assertRaises(InputError):
            load_heightfield_png(os.path.join(d, "missing.png"))

    def test_unknown_preset(self):
        with self.assertRaises(InputError):
            preset_heightfield("velvet")
