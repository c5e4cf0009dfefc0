"""Time-indexed diagnostic records with a fixed CSV layout."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

BASE_COLUMNS = ("t", "step", "mass", "linf", "boundary_mass")


class DiagnosticsSeries:
    """Rows of named scalar diagnostics, one per recorded time.

    Columns are fixed when the series is created: the base columns, then
    ``L{p}`` for each requested ``p``, then any extra columns. Times must be
    strictly increasing and every entry finite.
    """

    def __init__(self, p_list=(), extra=()):
        self.p_list = tuple(float(p) for p in p_list)
        cols = list(BASE_COLUMNS) + [lp_column(p) for p in self.p_list] + list(extra)
        if len(set(cols)) != len(cols):
            raise ValueError(f"duplicate column names in {cols}")
        self.columns = tuple(cols)
        self._rows: list[tuple[float, ...]] = []

    def append(self, **values) -> None:
        missing = [c for c in self.columns if c not in values]
        unknown = [k for k in values if k not in self.columns]
        if missing or unknown:
            raise ValueError(f"row mismatch: missing {missing}, unknown {unknown}")
        row = tuple(float(values[c]) for c in self.columns)
        if not all(math.isfinite(v) for v in row):
            raise ValueError(f"non-finite diagnostic in row {dict(zip(self.columns, row))}")
        if self._rows and not row[0] > self._rows[-1][0]:
            raise ValueError(f"time must increase strictly: {row[0]} after {self._rows[-1][0]}")
        self._rows.append(row)

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, col: str) -> np.ndarray:
        k = self.columns.index(col)
        return np.array([r[k] for r in self._rows])

    def row(self, i: int) -> dict[str, float]:
        return dict(zip(self.columns, self._rows[i]))

    def add_column(self, name: str, values) -> None:
        values = np.asarray(values, dtype=float)
        if name in self.columns:
            raise ValueError(f"column {name!r} already present")
        if values.shape != (len(self),):
            raise ValueError(f"expected {len(self)} values for column {name!r}")
        if not np.isfinite(values).all():
            raise ValueError(f"non-finite values in column {name!r}")
        self.columns = self.columns + (name,)
        self._rows = [r + (float(v),) for r, v in zip(self._rows, values)]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self._rows:
            w.writerow([repr(v) for v in r])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "DiagnosticsSeries":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise ValueError(f"unexpected series header {header}")
        out = cls()
        out.columns = tuple(header)
        for r in rows[1:]:
            out.append(**dict(zip(header, map(float, r))))
        out.p_list = tuple(float(c[1:]) for c in header if c.startswith("L") and _is_number(c[1:]))
        return out


def lp_column(p: float) -> str:
    return "Linf" if math.isinf(p) else f"L{float(p):g}"


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
