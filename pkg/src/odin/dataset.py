"""Observation container and its CSV format (``t,y1,...,yK``)."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from odin.kernel import check_grid


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Noisy observations ``y`` (N x K) on a shared grid ``t``.

    The ``x_true``/``theta_true``/``x0_true`` fields hold ground truth when
    the data were simulated, for scoring only.
    """

    t: np.ndarray
    y: np.ndarray
    x_true: Optional[np.ndarray] = None
    theta_true: Optional[np.ndarray] = None
    x0_true: Optional[np.ndarray] = None
    noise_sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        t = check_grid(self.t)
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != t.size:
            raise ValueError(f"{y.shape[0]} observation rows for {t.size} time points")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @property
    def N(self):
        return self.t.size

    @property
    def K(self):
        return self.y.shape[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def format_float(v):
    return repr(float(v))


def write_csv(dataset, path_or_buf):
    """Write ``t,y1..yK`` rows with LF line endings."""
    header = ["t"] + [f"y{k + 1}" for k in range(dataset.K)]
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", encoding="utf-8", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ti, row in zip(dataset.t, dataset.y):
            w.writerow([format_float(ti)] + [format_float(v) for v in row])
    finally:
        if own:
            fh.close()


def read_csv(path_or_buf) -> TimeSeriesDataset:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, encoding="utf-8", newline="") if own else path_or_buf
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    if not rows:
        raise ValueError("empty dataset file")
    header = [h.strip() for h in rows[0]]
    expected = ["t"] + [f"y{k + 1}" for k in range(len(header) - 1)]
    if len(header) < 2 or header != expected:
        raise ValueError(f"bad header {header}; expected t,y1,...,yK")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset has no rows")
    return TimeSeriesDataset(t=data[:, 0], y=data[:, 1:])


def to_csv_string(dataset):
    buf = io.StringIO()
    write_csv(dataset, buf)
    return buf.getvalue()
