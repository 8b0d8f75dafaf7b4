import dataclasses
import enum
import math
import os
import pathlib
import sys
from dataclasses import dataclass
from typing import (
    Annotated,
    Any,
    Callable,
    Dict,
    Generator,
    Iterator,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .prelude import (
    LOG,
    BadMagicError,
    BoolArray,
    ByteArray,
    ConfigError,
    ContractViolation,
    FloatArray,
    FormatError,
    InputError,
    IntArray,
    InvalidRecordError,
    InvariantError,
    KeyValue,
    MatError,
    NonFiniteValueError,
    PathLike,
    ShapeMismatchError,
    StrDict,
    Stopwatch,
    TrainingDivergedError,
    TruncatedFileError,
    VersionMismatchError,
    eprint,
    opt_or,
    pluralize,
    read_key_values,
    require_finite,
    sha256_file,
    timed,
)

__all__ = [
    "dataclasses",
    "enum",
    "math",
    "os",
    "pathlib",
    "sys",
    "dataclass",
    "Annotated",
    "Any",
    "Callable",
    "Dict",
    "Generator",
    "Iterator",
    "Iterable",
    "List",
    "Optional",
    "Sequence",
    "Tuple",
    "Union",
    "LOG",
    "BadMagicError",
    "BoolArray",
    "ByteArray",
    "ConfigError",
    "ContractViolation",
    "FloatArray",
    "FormatError",
    "InputError",
    "IntArray",
    "InvalidRecordError",
    "InvariantError",
    "KeyValue",
    "MatError",
    "NonFiniteValueError",
    "PathLike",
    "ShapeMismatchError",
    "StrDict",
    "Stopwatch",
    "TrainingDivergedError",
    "TruncatedFileError",
    "VersionMismatchError",
    "eprint",
    "opt_or",
    "pluralize",
    "read_key_values",
    "require_finite",
    "sha256_file",
    "timed",
]
