"""Right-censored IV samples: observation records, datasets, CSV ingestion.

A dataset holds follow-up times ``y = min(T, C)``, a categorical treatment
``z``, a categorical instrument ``w`` and the event indicator ``delta``
(1 = uncensored).  Treatment and instrument labels are arbitrary strings
mapped to integer indices in first-appearance order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError

CSV_HEADER = ("y", "z", "w", "delta")


@dataclass(frozen=True)
class ObservationRecord:
    """One subject: follow-up time, treatment index, instrument index, event flag."""

    y: float
    z: int
    w: int
    delta: int

    def __post_init__(self):
        if not (math.isfinite(self.y) and self.y >= 0):
            raise ValueError(f"y must be finite and nonnegative, got {self.y}")
        if self.delta not in (0, 1):
            raise ValueError(f"delta must be 0 or 1, got {self.delta}")


class Dataset:
    """Immutable column store of observations plus the level catalogs.

    Parameters
    ----------
    y, z, w, delta : array-like
        Follow-up times, treatment indices, instrument indices, event flags.
    z_levels, w_levels : sequence of str
        Catalogs; every index in ``z``/``w`` must reference a catalog entry.
    """

    def __init__(self, y, z, w, delta, z_levels, w_levels):
        self.y = np.asarray(y, dtype=float)
        self.z = np.asarray(z, dtype=np.int64)
        self.w = np.asarray(w, dtype=np.int64)
        self.delta = np.asarray(delta, dtype=np.int64)
        self.z_levels = tuple(str(v) for v in z_levels)
        self.w_levels = tuple(str(v) for v in w_levels)
        self._validate()
        for arr in (self.y, self.z, self.w, self.delta):
            arr.setflags(write=False)

    def _validate(self):
        n = self.y.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one observation")
        shapes = {a.shape for a in (self.y, self.z, self.w, self.delta)}
        if shapes != {(n,)}:
            raise ValueError("y, z, w, delta must be 1-d arrays of equal length")
        if not np.all(np.isfinite(self.y)) or np.any(self.y < 0):
            raise ValueError("y must be finite and nonnegative")
        if np.any(self.z < 0) or np.any(self.z >= len(self.z_levels)):
            raise ValueError("treatment index out of catalog range")
        if np.any(self.w < 0) or np.any(self.w >= len(self.w_levels)):
            raise ValueError("instrument index out of catalog range")
        if not np.isin(self.delta, (0, 1)).all():
            raise ValueError("delta must be 0 or 1")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_treatments(self) -> int:
        return len(self.z_levels)

    @property
    def n_instruments(self) -> int:
        return len(self.w_levels)

    def cell_mask(self, z: int, w: int) -> np.ndarray:
        return (self.z == z) & (self.w == w)

    def cell_counts(self) -> np.ndarray:
        """(L, K) table of observation counts per (treatment, instrument) cell."""
        counts = np.zeros((self.n_treatments, self.n_instruments), dtype=np.int64)
        np.add.at(counts, (self.z, self.w), 1)
        return counts

    def empty_cells(self):
        """Cells with zero observations, as (z_index, w_index) pairs."""
        counts = self.cell_counts()
        return [tuple(ij) for ij in np.argwhere(counts == 0)]

    def records(self):
        for i in range(self.n):
            yield ObservationRecord(
                float(self.y[i]), int(self.z[i]), int(self.w[i]), int(self.delta[i])
            )

    def resample(self, indices) -> "Dataset":
        """New dataset made of the given row indices (with repetition allowed)."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.y[idx], self.z[idx], self.w[idx], self.delta[idx],
            self.z_levels, self.w_levels,
        )

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(
            self.y[mask], self.z[mask], self.w[mask], self.delta[mask],
            self.z_levels, self.w_levels,
        )

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.z_levels == other.z_levels
            and self.w_levels == other.w_levels
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.delta, other.delta)
        )


@dataclass
class _Catalog:
    """Label -> index mapping that assigns indices in first-appearance order."""

    labels: list = field(default_factory=list)
    index: dict = field(default_factory=dict)

    def get(self, label: str) -> int:
        if label not in self.index:
            self.index[label] = len(self.labels)
            self.labels.append(label)
        return self.index[label]


def read_csv(path) -> Dataset:
    """Parse an observation CSV with header ``y,z,w,delta``.

    Treatment and instrument labels may be arbitrary strings; they are mapped
    to catalog indices in order of first appearance.  Malformed rows raise
    :class:`DataFormatError` citing the 1-based line number.
    """
    z_cat, w_cat = _Catalog(), _Catalog()
    y, z, w, delta = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(
                f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}",
                line=1,
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise DataFormatError(f"expected 4 fields, got {len(row)}", line=lineno)
            y_raw, z_raw, w_raw, d_raw = (f.strip() for f in row)
            try:
                y_val = float(y_raw)
            except ValueError:
                raise DataFormatError(f"y is not a number: {y_raw!r}", line=lineno) from None
            if math.isnan(y_val):
                raise DataFormatError("y is NaN", line=lineno)
            if math.isinf(y_val):
                raise DataFormatError("y is infinite", line=lineno)
            if y_val < 0:
                raise DataFormatError(f"y is negative: {y_raw}", line=lineno)
            if d_raw not in ("0", "1"):
                raise DataFormatError(f"delta must be 0 or 1, got {d_raw!r}", line=lineno)
            y.append(y_val)
            z.append(z_cat.get(z_raw))
            w.append(w_cat.get(w_raw))
            delta.append(int(d_raw))
    if not y:
        raise DataFormatError("no data rows", line=2)
    return Dataset(y, z, w, delta, z_cat.labels, w_cat.labels)


def write_csv(dataset: Dataset, path) -> None:
    """Write a dataset back out in the ingestion format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(dataset.n):
            writer.writerow(
                [
                    repr(float(dataset.y[i])),
                    dataset.z_levels[dataset.z[i]],
                    dataset.w_levels[dataset.w[i]],
                    int(dataset.delta[i]),
                ]
            )
