import tempfile

import numpy as np
from expecttest import TestCase

from ..gradcheck import numeric_gradient, relative_error
from ..offset import Direction
from ..prelude import *

from .material import (
    MaterialGrads,
    MbtfMaterial,
    Query,
    QueryBatch,
    backward_batch,
    cosine_pdf,
    evaluate,
    evaluate_baseline,
    evaluate_batch,
    forward_batch,
    load_material,
    sample_cosine,
    sample_outgoing,
    save_material,
)


def random_material(
    seed: int, k: int = 3, c: int = 3, *, with_offset: bool = True
) -> MbtfMaterial:
    mat = MbtfMaterial.init(k, c, c, seed, with_offset=with_offset, texture_std=1.0)
    rng = np.random.default_rng(seed)
    for b in mat.decoder.biases:
        b[:] = rng.uniform(0.05, 0.3, size=b.shape)
    if mat.offset is not None:
        for b in mat.offset.mlp.biases:
            b[:] = rng.normal(0.0, 0.2, size=b.shape)
    mat.round_to_float32()
    return mat


def random_batch(rng: np.random.Generator, n: int, k: int) -> QueryBatch:
    wi, _ = sample_cosine(rng, n)
    wo, _ = sample_cosine(rng, n)
    return QueryBatch(
        uv=rng.uniform(-1.0, 2.0, size=(n, 2)),
        sigma=2.0 ** -rng.uniform(0, k + 1, size=n),
        wi=wi,
        wo=wo,
    )


def random_query(rng: np.random.Generator, k: int) -> Query:
    b = random_batch(rng, 1, k)
    return Query(
        p=(float(b.uv[0, 0]), float(b.uv[0, 1])),
        sigma=float(b.sigma[0]),
        wi=Direction(float(b.wi[0, 0]), float(b.wi[0, 1])),
        wo=Direction(float(b.wo[0, 0]), float(b.wo[0, 1])),
    )


class Test(TestCase):
    def test_zero_material(self):
        mat = MbtfMaterial.zeros(3, 7, 7)
        rng = np.random.default_rng(0)
        out = evaluate_batch(mat, random_batch(rng, 50, 3))
        self.assertEqual(0.0, float(np.max(np.abs(out))))

    def test_architecture_audit(self):
        mat = MbtfMaterial.zeros(2, 7, 7)
        self.assertExpectedInline(
            str(mat.param_counts()),
            """{'decoder': 1678, 'offset': 1576, 'pyramid texels': 147, 'offset texels': 112}""",
        )
        self.assertEqual(14, mat.channels + mat.offset_channels)

    def test_invalid_queries(self):
        mat = MbtfMaterial.zeros(2, 3, 3)
        good = QueryBatch(
            np.zeros((1, 2)), np.ones(1), np.zeros((1, 2)), np.zeros((1, 2))
        )
        evaluate_batch(mat, good)

        bad_direction = QueryBatch(
            np.zeros((1, 2)), np.ones(1), np.array([[0.9, 0.9]]), np.zeros((1, 2))
        )
        with self.assertRaises(ContractViolation):
            evaluate_batch(mat, bad_direction)

        bad_sigma = QueryBatch(np.zeros((1, 2)), np.zeros(1), good.wi, good.wo)
        with self.assertRaises(ContractViolation):
            evaluate_batch(mat, bad_sigma)

    def test_baseline(self):
        rng = np.random.default_rng(1)
        base = random_material(2, with_offset=False)
        for _ in range(10):
            q = random_query(rng, 3)
            np.testing.assert_array_equal(evaluate(base, q), evaluate_baseline(base, q))

        full = random_material(3)
        for _ in range(10):
            q = random_query(rng, 3)
            normal = Query(q.p, q.sigma, q.wi, Direction(0.0, 0.0))
            np.testing.assert_array_equal(
                evaluate(full, normal), evaluate_baseline(full, normal)
            )

        batch = random_batch(rng, 200, 3)
        batch.wo = batch.wo / np.linalg.norm(batch.wo, axis=1, keepdims=True) * 0.95
        neural = evaluate_batch(full, batch)
        differs = neural != evaluate_batch(full, batch, baseline=True)
        self.assertTrue(bool(np.any(differs)))

    def test_properties(self):
        rng = np.random.default_rng(4)
        mat = random_material(5)
        batch = random_batch(rng, 500, 3)
        out = evaluate_batch(mat, batch)
        self.assertTrue(bool(np.all(out >= 0)))
        self.assertTrue(bool(np.any(out > 0)))

        again = evaluate_batch(mat, batch)
        np.testing.assert_array_equal(out, again)

        shifted = batch.take(slice(None))
        shifted.uv = batch.uv + rng.integers(-3, 4, size=batch.uv.shape)
        np.testing.assert_allclose(evaluate_batch(mat, shifted), out, atol=1e-9)

    def test_batch_rows_match_single_queries(self):
        rng = np.random.default_rng(6)
        mat = random_material(7)
        batch = random_batch(rng, 64, 3)
        out = evaluate_batch(mat, batch)
        for n in range(0, 64, 7):
            single = evaluate_batch(mat, batch.take([n]))[0]
            np.testing.assert_array_equal(out[n], single)
        np.testing.assert_array_equal(
            out[10:30], evaluate_batch(mat, batch.take(slice(10, 30)))
        )

    def test_sample_outgoing(self):
        rng = np.random.default_rng(8)
        wi, pdf = sample_outgoing(rng)
        self.assertAlmostEqual(wi.z / math.pi, pdf, places=12)
        self.assertAlmostEqual(
            0.3183098861837907, cosine_pdf(Direction(0.0, 0.0)), places=15
        )

    def test_cosine_sampling_statistics(self):
        rng = np.random.default_rng(9)
        d, pdf = sample_cosine(rng, 1_000_000)
        z = np.sqrt(np.maximum(0.0, 1.0 - np.sum(d * d, axis=1)))
        self.assertLess(abs(float(np.mean(z)) - 2.0 / 3.0), 0.002)
        np.testing.assert_allclose(pdf, z / math.pi)

        # equal-area annuli of the unit disk, 9 degrees of freedom, p = 0.01
        r2 = np.sum(d * d, axis=1)
        counts = np.bincount(np.minimum((r2 * 10).astype(np.int64), 9), minlength=10)
        expected = d.shape[0] / 10
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        self.assertLess(chi2, 21.666)

    def test_save_load_round_trip(self):
        rng = np.random.default_rng(10)
        for with_offset in [True, False]:
            mat = random_material(11, with_offset=with_offset)
            mat.provenance.iterations = 1234
            mat.provenance.dataset_sha256 = bytes(range(32))
            batch = random_batch(rng, 1000, 3)
            with tempfile.TemporaryDirectory() as d:
                path = os.path.join(d, "m.neumat")
                save_material(mat, path)
                loaded = load_material(path)

            self.assertEqual(with_offset, loaded.has_offset)
            self.assertEqual(1234, loaded.provenance.iterations)
            self.assertEqual(bytes(range(32)), loaded.provenance.dataset_sha256)
            for (name, a), (_, b) in zip(mat.param_blocks(), loaded.param_blocks()):
                np.testing.assert_array_equal(a, b, err_msg=name)
            np.testing.assert_array_equal(
                evaluate_batch(mat, batch), evaluate_batch(loaded, batch)
            )

    def test_load_errors(self):
        mat = random_material(12, k=2)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "m.neumat")
            save_material(mat, path)
            with open(path, "rb") as f:
                good = f.read()

            def load_bytes(b: bytes) -> MbtfMaterial:
                bad = os.path.join(d, "bad.neumat")
                with open(bad, "wb") as f:
                    f.write(b)
                return load_material(bad)

            with self.assertRaises(BadMagicError):
                load_bytes(b"XMAT" + good[4:])

            with self.assertRaises(VersionMismatchError):
                load_bytes(good[:4] + (99).to_bytes(4, "little") + good[8:])

            with self.assertRaises(TruncatedFileError):
                load_bytes(good[:-5])

            with self.assertRaises(NonFiniteValueError):
                load_bytes(good[:-4] + np.array([np.nan], dtype="<f4").tobytes())

            with self.assertRaises(FormatError):
                load_bytes(good + b"\x00")

            with self.assertRaises(InputError):
                load_material(os.path.join(d, "missing.neumat"))

    def test_full_chain_gradients(self):
        rng = np.random.default_rng(13)
        for trial in range(50):
            mat = random_material(100 + trial, k=2, c=3)
            batch = random_batch(rng, 1, 2)
            up = rng.normal(size=(1, 3))

            _, cache = forward_batch(mat, batch)
            grads = MaterialGrads.zeros_like(mat)
            backward_batch(mat, cache, up, grads)

            def f() -> float:
                return float(np.sum(evaluate_batch(mat, batch) * up))

            for (name, analytic), (_, param) in zip(grads.blocks(), mat.param_blocks()):
                err = relative_error(analytic, numeric_gradient(f, param))
                self.assertLess(err, 1e-3, msg=name)
