"""Loading, normalization, windowing and chronological splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class ParseError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesTable:
    """K entities by L timesteps, plus per-timestep anomaly labels.

    Labels are carried for evaluation only.  ``offset`` is the absolute
    index of column 0 in the series this table was cut from.
    """

    values: np.ndarray
    labels: np.ndarray
    entity_names: tuple[str, ...]
    sample_period: float | None = None
    offset: int = 0
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if values.ndim != 2:
            raise ValueError(f"values must be 2-D (K x L), got shape {values.shape}")
        K, L = values.shape
        if K < 1 or L < 1:
            raise EmptyInputError(f"table needs K >= 1 and L >= 1, got K={K}, L={L}")
        if labels.shape != (L,):
            raise ValueError(f"labels length {labels.shape} does not match L={L}")
        if len(self.entity_names) != K:
            raise ValueError(f"{len(self.entity_names)} entity names for K={K}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values contain non-finite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "entity_names", tuple(self.entity_names))

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # N x K x M
    window_starts: np.ndarray
    window_labels: np.ndarray
    M: int
    S: int

    @property
    def N(self) -> int:
        return len(self.window_starts)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    valid_frac: float = 0.2
    test_frac: float = 0.2
    chronological: bool = True

    def validate(self) -> None:
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if any(f < 0 or f > 1 for f in fracs):
            raise ConfigError(f"split fractions must lie in [0, 1], got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)!r}")
        if not self.chronological:
            raise ConfigError("only chronological splits are supported")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool per entity

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["constant"], bool))


def load_csv(path, label_column: str | None = None) -> TimeSeriesTable:
    """Read a header-first CSV with one column per entity.

    Raises ParseError naming the row (1-based, header is row 1) and column
    for any non-numeric or missing entity cell.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise EmptyInputError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise EmptyInputError(f"{path}: no data rows after the header")
    if label_column is not None and label_column not in header:
        raise ParseError(f"{path}: label column '{label_column}' not found in header {header}")
    label_idx = header.index(label_column) if label_column is not None else None
    entity_idx = [i for i in range(len(header)) if i != label_idx]
    if not entity_idx:
        raise ParseError(f"{path}: no entity columns")

    values = np.empty((len(entity_idx), len(body)), dtype=np.float64)
    labels = np.zeros(len(body), dtype=np.int64)
    for t, row in enumerate(body):
        rowno = t + 2
        if len(row) != len(header):
            raise ParseError(f"{path}: row {rowno} has {len(row)} cells, expected {len(header)}")
        for k, i in enumerate(entity_idx):
            cell = row[i].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {rowno}, column '{header[i]}': non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: row {rowno}, column '{header[i]}': missing or non-finite value {cell!r}")
            values[k, t] = v
        if label_idx is not None:
            cell = row[label_idx].strip()
            try:
                lab = int(float(cell))
            except ValueError:
                raise ParseError(f"{path}: row {rowno}, column '{label_column}': bad label {cell!r}") from None
            if lab not in (0, 1):
                raise ParseError(f"{path}: row {rowno}, column '{label_column}': label must be 0 or 1, got {cell!r}")
            labels[t] = lab
    names = tuple(header[i] for i in entity_idx)
    return TimeSeriesTable(values, labels, names)


def write_csv(table: TimeSeriesTable, path, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*table.entity_names, label_column])
        for t in range(table.L):
            w.writerow([repr(float(v)) for v in table.values[:, t]] + [int(table.labels[t])])


def fit_normalization(table: TimeSeriesTable) -> NormStats:
    """Per-entity mean and population standard deviation."""
    if table.L < 2:
        raise ConfigError(f"normalization needs L >= 2, got L={table.L}")
    mean = table.values.mean(axis=1)
    std = table.values.std(axis=1)
    return NormStats(mean, std, std < STD_FLOOR)


def apply_normalization(table: TimeSeriesTable, stats: NormStats) -> TimeSeriesTable:
    """z-score ``table`` with precomputed statistics; dead channels become zeros."""
    if stats.mean.shape != (table.K,):
        raise ConfigError(f"normalization stats are for K={stats.mean.shape[0]}, table has K={table.K}")
    safe_std = np.where(stats.constant, 1.0, stats.std)
    values = (table.values - stats.mean[:, None]) / safe_std[:, None]
    values[stats.constant] = 0.0
    warns = list(table.warnings)
    for k in np.flatnonzero(stats.constant):
        msg = f"entity '{table.entity_names[k]}' has std < {STD_FLOOR:g}; replaced by zeros"
        logger.warning(msg)
        warns.append(msg)
    return replace(table, values=values, warnings=tuple(warns))


def zscore_normalize(table: TimeSeriesTable) -> TimeSeriesTable:
    return apply_normalization(table, fit_normalization(table))


def make_windows(table: TimeSeriesTable, M: int, S: int) -> WindowBatch:
    """Slide a length-M window with stride S over the table.

    A window is labeled anomalous when any timestep it covers is.
    ``window_starts`` are absolute (they include ``table.offset``).
    """
    if M < 1 or S < 1:
        raise ConfigError(f"window size and stride must be >= 1, got M={M}, S={S}")
    K, L = table.values.shape
    if M > L:
        logger.warning("window size %d exceeds series length %d; no windows", M, L)
        return WindowBatch(np.empty((0, K, M)), np.empty(0, np.int64), np.empty(0, np.int64), M, S)
    N = (L - M) // S + 1
    starts = np.arange(N) * S
    idx = starts[:, None] + np.arange(M)[None, :]
    windows = np.ascontiguousarray(np.transpose(table.values[:, idx], (1, 0, 2)))
    labels = table.labels[idx].max(axis=1).astype(np.int64)
    return WindowBatch(windows, starts + table.offset, labels, M, S)


def split(table: TimeSeriesTable, spec: SplitSpec) -> tuple[TimeSeriesTable, TimeSeriesTable | None, TimeSeriesTable | None]:
    """Contiguous chronological train/valid/test partition.

    Boundaries are ``floor(frac * L)`` cumulatively.  A zero-length part is
    returned as None.
    """
    spec.validate()
    L = table.L
    b1 = math.floor(spec.train_frac * L + 1e-9)
    b2 = math.floor((spec.train_frac + spec.valid_frac) * L + 1e-9)
    b2 = min(max(b2, b1), L)
    if spec.test_frac == 0:
        b2 = L
    parts = []
    for lo, hi in ((0, b1), (b1, b2), (b2, L)):
        if hi <= lo:
            parts.append(None)
            continue
        parts.append(
            TimeSeriesTable(
                table.values[:, lo:hi].copy(),
                table.labels[lo:hi].copy(),
                table.entity_names,
                table.sample_period,
                table.offset + lo,
                table.warnings,
            )
        )
    return tuple(parts)
