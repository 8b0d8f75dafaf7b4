import io
import tempfile

import numpy as np
from expecttest import TestCase

from ..prelude import *

from .binfile import ByteReader, ByteWriter, atomic_write


def reader(b: bytes) -> ByteReader:
    return ByteReader(io.BytesIO(b), "mem.bin")


class Test(TestCase):
    def test_fields(self):
        buf = io.BytesIO()
        w = ByteWriter(buf)
        w.raw(b"TEST")
        w.u32(7)
        w.u64(2**40 + 3)
        w.string("décor")
        w.f32_array([0.5, -2.0], "floats")
        w.f64_array([0.1], "doubles")

        r = reader(buf.getvalue())
        r.magic(b"TEST")
        r.version(7)
        self.assertEqual(2**40 + 3, r.u64("count"))
        self.assertEqual("décor", r.string("name"))
        self.assertEqual([0.5, -2.0], r.f32_array(2, "floats").tolist())
        self.assertEqual([0.1], r.f64_array(1, "doubles").tolist())
        r.expect_eof()

    def test_errors(self):
        with self.assertRaises(BadMagicError):
            reader(b"NOPE").magic(b"TEST")

        with self.assertRaises(VersionMismatchError):
            reader(b"\x02\x00\x00\x00").version(1)

        with self.assertRaises(TruncatedFileError) as ctx:
            reader(b"\x01\x00").u32("count")
        self.assertExpectedInline(
            str(ctx.exception),
            """file ended early (path='mem.bin', field='count', offset=0, expected=4, actual=2)""",
        )

        with self.assertRaises(NonFiniteValueError):
            reader(np.array([1.0, np.nan], dtype="<f4").tobytes()).f32_array(2, "x")

        with self.assertRaises(NonFiniteValueError):
            ByteWriter(io.BytesIO()).f32_array([np.inf], "x")

        with self.assertRaises(FormatError):
            reader(b"\x00").expect_eof()

    def test_atomic_write(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "out.bin")
            with atomic_write(path) as f:
                f.write(b"first")

            with self.assertRaises(RuntimeError):
                with atomic_write(path) as f:
                    f.write(b"second")
                    raise RuntimeError("interrupted")

            with open(path, "rb") as f:
                self.assertEqual(b"first", f.read())
            self.assertEqual(["out.bin"], os.listdir(d))
