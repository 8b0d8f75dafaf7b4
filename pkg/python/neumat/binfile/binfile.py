"""
Little-endian binary readers and writers shared by the material, dataset and optimizer
file formats.
"""

import contextlib
import struct
from typing import BinaryIO

import numpy as np

from ..prelude import *


class ByteReader:
    """
    Reads fixed-layout fields from a binary stream, raising `FormatError` subclasses
    that name the file and the field being read.
    """

    f: BinaryIO
    path: str
    offset: int

    def __init__(self, f: BinaryIO, path: PathLike) -> None:
        self.f = f
        self.path = os.fspath(path)
        self.offset = 0

    def read_exact(self, n: int, what: str) -> bytes:
        b = self.f.read(n)
        if len(b) != n:
            raise TruncatedFileError(
                "file ended early",
                path=self.path,
                field=what,
                offset=self.offset,
                expected=n,
                actual=len(b),
            )
        self.offset += n
        return b

    def magic(self, expected: bytes) -> None:
        b = self.f.read(len(expected))
        if b != expected:
            raise BadMagicError(
                "bad magic", path=self.path, expected=expected, actual=b
            )
        self.offset += len(expected)

    def version(self, expected: int) -> None:
        v = self.u32("version")
        if v != expected:
            raise VersionMismatchError(
                "unsupported format version",
                path=self.path,
                expected=expected,
                actual=v,
            )

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read_exact(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.read_exact(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.read_exact(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("invalid UTF-8", path=self.path, field=what) from e

    def f32_array(self, count: int, what: str) -> FloatArray:
        """
        Reads `count` float32 values, widened to float64. Rejects non-finite values.
        """
        raw = self.read_exact(4 * count, what)
        a = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise NonFiniteValueError(
                "non-finite values", path=self.path, field=what
            )
        return a

    def f64_array(self, count: int, what: str) -> FloatArray:
        raw = self.read_exact(8 * count, what)
        a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise NonFiniteValueError(
                "non-finite values", path=self.path, field=what
            )
        return a

    def expect_eof(self) -> None:
        rest = self.f.read(1)
        if rest:
            raise FormatError(
                "trailing bytes after the last field",
                path=self.path,
                offset=self.offset,
            )


class ByteWriter:
    f: BinaryIO

    def __init__(self, f: BinaryIO) -> None:
        self.f = f

    def raw(self, b: bytes) -> None:
        self.f.write(b)

    def u32(self, x: int) -> None:
        self.f.write(struct.pack("<I", x))

    def u64(self, x: int) -> None:
        self.f.write(struct.pack("<Q", x))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u32(len(b))
        self.f.write(b)

    def f32_array(self, a: Any, what: str) -> None:
        a32 = np.ascontiguousarray(a, dtype="<f4")
        if not np.all(np.isfinite(a32)):
            raise NonFiniteValueError("refusing to write non-finite values", field=what)
        self.f.write(a32.tobytes())

    def f64_array(self, a: Any, what: str) -> None:
        a64 = np.ascontiguousarray(a, dtype="<f8")
        if not np.all(np.isfinite(a64)):
            raise NonFiniteValueError("refusing to write non-finite values", field=what)
        self.f.write(a64.tobytes())


@contextlib.contextmanager
def atomic_write(path: PathLike) -> Generator[BinaryIO, None, None]:
    """
    Writes to a sibling temporary file and renames it over `path` on success, so readers
    never observe a partial file.
    """
    target = os.fspath(path)
    tmp = target + ".tmp"
    try:
        with open(tmp, "wb") as f:
            yield f
        os.replace(tmp, target)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(tmp)
        raise
