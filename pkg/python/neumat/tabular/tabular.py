import csv
import io

from ..prelude import *


class Table:
    """
    Fixed-width text tables for terminal reports, with a CSV rendering of the same rows.

    Numbers go through `numformat` in the text form and keep full precision in CSV.
    """

    _widths: List[int]
    _rows: List[List[str]]
    _raw_rows: List[List[Any]]
    _has_header: bool
    _numformat: str

    DEFAULT_SPACING = 2

    def __init__(self, *, numformat: str = "{}") -> None:
        self._widths = []
        self._rows = []
        self._raw_rows = []
        self._has_header = False
        self._numformat = numformat

    def header(self, items: List[Any]) -> None:
        if self._rows:
            raise MatError("header must be the first row")

        self.row(items)
        self._has_header = True

    def row(self, items: List[Any]) -> None:
        if self._rows and len(items) != len(self._widths):
            raise MatError(
                "row wrong length",
                expected=len(self._widths),
                actual=len(items),
                items=items,
            )

        items_as_str = [self._format(item) for item in items]
        if not self._widths:
            self._widths = [len(item) for item in items_as_str]
        else:
            self._widths = [max(w, len(s)) for w, s in zip(self._widths, items_as_str)]

        self._rows.append(items_as_str)
        self._raw_rows.append(list(items))

    def ncols(self) -> int:
        return len(self._widths)

    def nrows(self) -> int:
        return len(self._rows) - (1 if self._has_header else 0)

    def to_list(
        self, *, spacing: int = DEFAULT_SPACING, align: Optional[List[str]] = None
    ) -> List[str]:
        align = self._check_align(align)
        spaces = " " * spacing
        lines: List[str] = []
        for row in self._rows:
            cells: List[str] = []
            for item, width, alignment in zip(row, self._widths, align):
                if alignment == "l":
                    cells.append(item.ljust(width))
                elif alignment == "r":
                    cells.append(item.rjust(width))
                else:
                    cells.append(item.center(width))
            lines.append(spaces.join(cells).rstrip())
        return lines

    def to_string(
        self, *, spacing: int = DEFAULT_SPACING, align: Optional[List[str]] = None
    ) -> str:
        return "\n".join(self.to_list(spacing=spacing, align=align)) + "\n"

    def flush(
        self,
        *,
        spacing: int = DEFAULT_SPACING,
        align: Optional[List[str]] = None,
        file: Any = None,
    ) -> None:
        print(self.to_string(spacing=spacing, align=align), end="", file=file)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for raw in self._raw_rows:
            writer.writerow([_csv_cell(item) for item in raw])
        return buf.getvalue()

    def write_csv(self, path: PathLike) -> None:
        try:
            pathlib.Path(path).write_text(self.to_csv())
        except OSError as e:
            raise InputError("could not write CSV", path=str(path), reason=str(e))

    def _format(self, item: Any) -> str:
        if isinstance(item, bool):
            return str(item)
        if isinstance(item, (int, float)):
            return self._numformat.format(item)
        return str(item)

    def _check_align(self, align: Optional[List[str]]) -> List[str]:
        if align is None or len(align) == 0:
            return ["l"] * self.ncols()

        if len(align) != self.ncols():
            raise MatError(
                "alignment list must match number of columns",
                expected=self.ncols(),
                actual=len(align),
            )

        valid_alignments = {"l", "c", "r"}
        if not all(a in valid_alignments for a in align):
            raise MatError(
                "invalid alignment values",
                valid_values=sorted(valid_alignments),
                provided=align,
            )
        return list(align)


def _csv_cell(item: Any) -> str:
    if isinstance(item, float):
        return repr(item)
    return str(item)
