import hashlib
import os
import tempfile

import numpy as np
from expecttest import TestCase

from .prelude import (
    ConfigError,
    InputError,
    MatError,
    NonFiniteValueError,
    TrainingDivergedError,
    opt_or,
    pluralize,
    read_key_values,
    require_finite,
    sha256_file,
)


class Test(TestCase):
    def test_error_formatting(self):
        e = TrainingDivergedError("loss is not finite", iteration=12, blur_sigma=0.5)
        self.assertEqual(12, e.val("iteration"))
        self.assertExpectedInline(
            str(e), """loss is not finite (iteration=12, blur_sigma=0.5)"""
        )
        self.assertExpectedInline(
            e.attach(batch_size=4).to_human_str(),
            """\
loss is not finite
  iteration: 12
  blur_sigma: 0.5
  batch_size: 4""",
        )
        self.assertIsInstance(e.attach(), TrainingDivergedError)
        self.assertEqual("plain", str(MatError("plain")))

    def test_read_key_values(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "a.cfg")
            with open(path, "w") as f:
                f.write("# header\n\nk = 4  # finest level\nname=flat = yes\n")
            kvs = read_key_values(path)
            self.assertEqual(
                [("k", "4", 3), ("name", "flat = yes", 4)],
                [(kv.key, kv.value, kv.lineno) for kv in kvs],
            )

            with open(path, "w") as f:
                f.write("k = 4\nnot a pair\n")
            with self.assertRaises(ConfigError) as cm:
                read_key_values(path)
            self.assertEqual(2, cm.exception.val("line"))

        with self.assertRaises(InputError):
            read_key_values("/nonexistent/neumat.cfg")

    def test_helpers(self):
        self.assertEqual("1 record", pluralize(1, "record"))
        self.assertEqual("65,536 records", pluralize(65536, "record"))
        self.assertEqual(0, opt_or(0, 5))
        self.assertEqual(5, opt_or(None, 5))

        with self.assertRaises(NonFiniteValueError):
            require_finite("weights", np.array([1.0, np.nan]))
        require_finite("weights", np.zeros(3))

    def test_sha256(self):
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "blob")
            with open(path, "wb") as f:
                f.write(b"neumat")
            expected = hashlib.sha256(b"neumat").hexdigest()
            self.assertEqual(expected, sha256_file(path).hex())
