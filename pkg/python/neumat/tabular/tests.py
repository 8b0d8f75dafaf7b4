import unittest
from io import StringIO
from textwrap import dedent

from ..prelude import MatError
from . import Table


class Test(unittest.TestCase):
    def test_tabular(self):
        table = Table(numformat="{:.3g}")
        table.header(["level", "sigma", "mse"])
        table.row([0, 1.0, 0.0123456])
        table.row([1, 0.5, 0.25])
        table.row([10, 0.0009765625, 3.0])

        buffer = StringIO()
        table.flush(file=buffer, align=["r", "l", "l"])
        self.assertEqual(
            dedent(
                """\
                level  sigma     mse
                    0  1         0.0123
                    1  0.5       0.25
                   10  0.000977  3
                """
            ),
            buffer.getvalue(),
        )
        self.assertEqual(3, table.nrows())

    def test_csv_keeps_precision(self):
        table = Table(numformat="{:.2f}")
        table.header(["level", "sigma", "mse"])
        table.row([2, 0.25, 0.1 + 0.2])

        self.assertEqual(
            "level,sigma,mse\n2,0.25,0.30000000000000004\n", table.to_csv()
        )
        self.assertEqual(["level  sigma  mse", "2      0.25   0.30"], table.to_list())

    def test_row_length_mismatch(self):
        table = Table()
        table.row(["a", "b"])
        with self.assertRaises(MatError):
            table.row(["a"])

    def test_header_must_come_first(self):
        table = Table()
        table.row(["a"])
        with self.assertRaises(MatError):
            table.header(["h"])

    def test_bad_alignment(self):
        table = Table()
        table.row(["a", "b"])
        with self.assertRaises(MatError):
            table.to_string(align=["l"])
        with self.assertRaises(MatError):
            table.to_string(align=["l", "x"])

    def test_center(self):
        table = Table()
        table.row(["x", "long"])
        table.row(["wide", "y"])
        self.assertEqual(" x    long\nwide   y\n", table.to_string(align=["c", "c"]))
