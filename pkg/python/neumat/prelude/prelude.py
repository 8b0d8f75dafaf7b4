import contextlib
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, Generator, List, Optional, TypeVar, Union

import numpy as np
import numpy.typing as npt

StrDict = Dict[str, Any]
PathLike = Union[os.PathLike[str], str]
FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
ByteArray = npt.NDArray[np.uint8]
BoolArray = npt.NDArray[np.bool_]

LOG = logging.getLogger("neumat")


class MatError(Exception):
    """
    An exception with key-value diagnostic information and a human-readable format.
    """

    _values: StrDict

    def __init__(self, msg: str, **values: Any) -> None:
        super().__init__(msg, values)
        self._values = values

    @property
    def message(self) -> str:
        return self.args[0]

    def val(self, key: str) -> Any:
        """
        Returns the value associated with `key`.
        """
        return self._values[key]

    def attach(self, **extra: Any) -> "MatError":
        """
        Returns a copy of the error (same class) with more information attached.
        """
        values = self._values.copy()
        values.update(extra)
        return type(self)(self.message, **values)

    def to_human_str(self) -> str:
        builder: List[str] = [self.message]
        for key, value in self._values.items():
            builder.append(f"  {key}: {value!r}")
        return "\n".join(builder)

    def __str__(self) -> str:
        if not self._values:
            return self.message

        details = ", ".join(f"{k}={v!r}" for k, v in self._values.items())
        return f"{self.message} ({details})"


class InputError(MatError):
    """Bad user input: files, flags, queries. The CLI exits with code 2."""


class FormatError(InputError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


class InvalidRecordError(FormatError):
    pass


class ConfigError(InputError):
    pass


class ContractViolation(InputError):
    pass


class ShapeMismatchError(InputError):
    pass


class InvariantError(MatError):
    """An internal invariant failed. The CLI exits with code 3."""


class TrainingDivergedError(InvariantError):
    pass


def eprint(*args: Any, **kwargs: Any) -> None:
    """
    Prints to standard error.
    """
    print(*args, file=sys.stderr, **kwargs)


def pluralize(n: int, word: str, plural: str = "") -> str:
    """
    Appends 's' to `word` if `n` is not 1.
    """
    if not plural:
        plural = word + "s"
    return f"{n:,} {word}" if n == 1 else f"{n:,} {plural}"


T = TypeVar("T")


def opt_or(x: Optional[T], default: T) -> T:
    """
    Returns `x` if not None, otherwise `default`.

    Safer than `x or default`, which discards 0 and the empty string.
    """
    return x if x is not None else default


def sha256_file(path: PathLike) -> bytes:
    """
    Returns the raw 32-byte SHA-256 digest of a file's contents, read in chunks.
    """
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.digest()


def require_finite(name: str, x: Any) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteValueError("non-finite values", field=name)


class Stopwatch:
    start_secs: float
    elapsed_secs: float

    def __init__(self) -> None:
        self.start_secs = time.perf_counter()
        self.elapsed_secs = 0.0


@contextlib.contextmanager
def timed(label: str = "") -> Generator[Stopwatch, None, None]:
    """
    Measures the duration of the `with` block and logs it at INFO.

    The elapsed time is also available on the yielded object after the block exits.
    """
    watch = Stopwatch()
    try:
        yield watch
    finally:
        watch.elapsed_secs = time.perf_counter() - watch.start_secs
        if label:
            LOG.info("duration (%s): %.1fs", label, watch.elapsed_secs)
        else:
            LOG.info("duration: %.1fs", watch.elapsed_secs)


@dataclass
class KeyValue:
    key: str
    value: str
    lineno: int


def read_key_values(path: PathLike) -> List[KeyValue]:
    """
    Reads a flat `key = value` file. `#` starts a comment and blank lines are skipped.
    Later lines win over earlier lines with the same key.
    """
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise InputError("could not read file", path=os.fspath(path)) from e

    out: List[KeyValue] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue

        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(
                "expected a line of the form `key = value`",
                path=os.fspath(path),
                line=lineno,
            )
        out.append(KeyValue(key=key, value=value.strip(), lineno=lineno))
    return out
