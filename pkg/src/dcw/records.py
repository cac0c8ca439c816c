"""Time series containers and the CSV writer shared by the engines."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def format_float(x) -> str:
    # 17 significant digits round-trip any IEEE double.
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path, header, rows) -> Path:
    """Write ``rows`` under ``header``; floats use round-trip formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else format_float(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@dataclass
class RunRecord:
    """Observable time series sampled at a fixed cadence.

    ``columns`` maps each header name to a 1-D array; all arrays share the
    length of the ``t`` column.
    """

    header: tuple[str, ...]
    columns: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, header, rows, **meta):
        arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
        return cls(tuple(header), {h: arr[:, k].copy() for k, h in enumerate(header)}, dict(meta))

    def __getitem__(self, name) -> np.ndarray:
        return self.columns[name]

    def __len__(self):
        return len(self.columns[self.header[0]])

    @property
    def t(self) -> np.ndarray:
        return self.columns["t"]

    def rows(self):
        cols = [self.columns[h] for h in self.header]
        for k in range(len(self)):
            yield [c[k] for c in cols]

    def to_csv(self, path) -> Path:
        int_cols = {h for h in self.header if h == "flips"}
        rows = (
            [int(v) if h in int_cols else v for h, v in zip(self.header, row)]
            for row in self.rows()
        )
        return write_csv(path, self.header, rows)
