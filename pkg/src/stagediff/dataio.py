"""Data ingestion and export.

Loads raw multivariate series from CSV, min-max normalizes per feature,
cuts sliding windows, splits windows into equal-length stages, and inverts
the normalization when writing synthetic output back to CSV.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

EPSILON_DEFAULT = 1e-7


@dataclass(frozen=True)
class ColumnSchema:
    """Column selection for CSV loading.

    columns: feature column names in order; None selects every numeric column.
    row_range: optional [start, stop) slice applied after the header.
    missing_policy: "drop" removes rows with any missing/unparsable cell and
    logs the count; "error" rejects the file, naming the first bad row.
    """

    columns: Optional[Sequence[str]] = None
    delimiter: str = ","
    row_range: Optional[Tuple[int, int]] = None
    missing_policy: str = "drop"

    def __post_init__(self):
        if self.missing_policy not in ("drop", "error"):
            raise ConfigError(f"missing_policy {self.missing_policy!r} not in ('drop', 'error')")


@dataclass(frozen=True)
class RawSeries:
    """A loaded multivariate series: values [T_raw, D] in as-loaded units."""

    values: np.ndarray
    feature_names: List[str]
    source_path: str = ""

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    @property
    def D(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class NormStats:
    """Per-feature min/max fitted on the full series, plus the constant-feature guard."""

    minimum: np.ndarray
    maximum: np.ndarray
    epsilon: float = EPSILON_DEFAULT

    def __post_init__(self):
        if np.any(self.minimum > self.maximum):
            raise ValueError("per-feature min exceeds max")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "min": self.minimum.tolist(),
                "max": self.maximum.tolist(),
                "epsilon": self.epsilon,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        obj = json.loads(text)
        return cls(
            minimum=np.asarray(obj["min"], dtype=np.float64),
            maximum=np.asarray(obj["max"], dtype=np.float64),
            epsilon=float(obj["epsilon"]),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path | str) -> "NormStats":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class WindowSet:
    """N normalized windows of shape [L_ser, D], the training/sampling unit."""

    windows: np.ndarray
    L_ser: int
    stride: int

    def __post_init__(self):
        if self.windows.ndim != 3:
            raise ValueError("windows must be [N, L_ser, D]")
        if self.windows.shape[1] != self.L_ser:
            raise ValueError("window length does not match L_ser")

    @property
    def N(self) -> int:
        return int(self.windows.shape[0])

    @property
    def D(self) -> int:
        return int(self.windows.shape[2])


@dataclass(frozen=True)
class StageView:
    """Ordered stage slices of one window; concatenating them reproduces it."""

    stages: List[np.ndarray]
    M: int
    L_sta: int


def load_csv(path: Path | str, schema: Optional[ColumnSchema] = None) -> RawSeries:
    """Load selected feature columns from a CSV file with a header row."""
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, delimiter=schema.delimiter)
    except Exception as exc:
        raise DataError(f"failed to parse {path}: {exc}") from exc
    if schema.row_range is not None:
        start, stop = schema.row_range
        frame = frame.iloc[start:stop]
    if schema.columns is not None:
        missing = [c for c in schema.columns if c not in frame.columns]
        if missing:
            raise DataError(f"columns not found in {path.name}: {missing}")
        frame = frame[list(schema.columns)]
        parsed = frame.apply(pd.to_numeric, errors="coerce")
    else:
        # Auto-selection keeps columns that are numeric for most rows, so a
        # date/index column is excluded but a stray bad cell still hits the
        # missing-value policy below.
        coerced = frame.apply(pd.to_numeric, errors="coerce")
        keep = [c for c in frame.columns if coerced[c].notna().mean() > 0.5]
        if not keep:
            raise DataError(f"no numeric columns in {path.name}")
        parsed = coerced[keep]
    names = [str(c) for c in parsed.columns]
    bad_mask = parsed.isna().any(axis=1)
    if bad_mask.any():
        if schema.missing_policy == "error":
            row = int(np.nonzero(bad_mask.to_numpy())[0][0])
            col = parsed.columns[parsed.iloc[row].isna().to_numpy()][0]
            raise DataError(
                f"non-numeric or missing cell at row {row}, column {col!r} in {path.name}"
            )
        dropped = int(bad_mask.sum())
        log.info("dropped %d incomplete rows from %s", dropped, path.name)
        parsed = parsed[~bad_mask]
    values = parsed.to_numpy(dtype=np.float64)
    if values.shape[0] == 0:
        raise DataError(f"no usable rows in {path.name}")
    return RawSeries(values=values, feature_names=names, source_path=str(path))


def fit_normalize(raw: RawSeries, epsilon: float = EPSILON_DEFAULT) -> Tuple[RawSeries, NormStats]:
    """Map each feature through (x - min) / (max - min + epsilon) into [0, 1).

    Constant features land at 0; the stats allow exact inversion.
    """
    if raw.length == 0:
        raise DataError("cannot normalize an empty series")
    lo = raw.values.min(axis=0)
    hi = raw.values.max(axis=0)
    stats = NormStats(minimum=lo, maximum=hi, epsilon=epsilon)
    normalized = apply_normalize(raw.values, stats)
    return (
        RawSeries(values=normalized, feature_names=list(raw.feature_names), source_path=raw.source_path),
        stats,
    )


def apply_normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.minimum) / (stats.maximum - stats.minimum + stats.epsilon)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse of apply_normalize; recovers inputs within 1e-9 relative."""
    return values * (stats.maximum - stats.minimum + stats.epsilon) + stats.minimum


def make_windows(raw: RawSeries, L_ser: int, stride: int = 1) -> WindowSet:
    """Cut N = floor((T_raw - L_ser)/stride) + 1 contiguous windows."""
    if L_ser < 2:
        raise ConfigError(f"L_ser={L_ser} must be >= 2")
    if stride < 1:
        raise ConfigError(f"stride={stride} must be >= 1")
    T_raw = raw.length
    if T_raw < L_ser:
        raise DataError(f"series length {T_raw} shorter than window length {L_ser}")
    n = (T_raw - L_ser) // stride + 1
    windows = np.stack([raw.values[i * stride : i * stride + L_ser] for i in range(n)])
    return WindowSet(windows=windows, L_ser=L_ser, stride=stride)


def split_stages(window: np.ndarray, M: int) -> StageView:
    """Split one [L_ser, D] window into M contiguous stages of length L_sta."""
    L_ser = window.shape[0]
    if M < 1:
        raise ConfigError(f"M={M} must be >= 1")
    if L_ser % M != 0:
        raise ConfigError(f"L_ser={L_ser} not divisible by M={M}")
    L_sta = L_ser // M
    stages = [window[m * L_sta : (m + 1) * L_sta] for m in range(M)]
    return StageView(stages=stages, M=M, L_sta=L_sta)


def write_windows_csv(
    windows: WindowSet,
    feature_names: Sequence[str],
    path: Path | str,
    stats: Optional[NormStats] = None,
    one_file_per_window: bool = False,
) -> List[Path]:
    """Write windows to CSV after optional denormalization.

    Default: one long file with a leading window_id column. With
    one_file_per_window, emits ``<stem>_w<i>.csv`` per window instead.
    Returns the written paths.
    """
    path = Path(path)
    values = windows.windows
    if stats is not None:
        values = denormalize(values, stats)
    names = list(feature_names)
    if len(names) != windows.D:
        raise ValueError(f"{len(names)} feature names for D={windows.D}")
    written: List[Path] = []
    path.parent.mkdir(parents=True, exist_ok=True)
    if one_file_per_window:
        for i in range(windows.N):
            target = path.with_name(f"{path.stem}_w{i}{path.suffix or '.csv'}")
            pd.DataFrame(values[i], columns=names).to_csv(target, index=False)
            written.append(target)
        return written
    rows = values.reshape(-1, windows.D) if windows.N else np.empty((0, windows.D))
    frame = pd.DataFrame(rows, columns=names)
    frame.insert(0, "window_id", np.repeat(np.arange(windows.N), windows.L_ser))
    frame.to_csv(path, index=False)
    written.append(path)
    return written


def read_windows_csv(path: Path | str, L_ser: int) -> Tuple[WindowSet, List[str]]:
    """Read back a long-format windows CSV written by write_windows_csv."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"windows CSV not found: {path}")
    frame = pd.read_csv(path)
    if "window_id" not in frame.columns:
        raise DataError(f"{path.name} missing the window_id column")
    names = [c for c in frame.columns if c != "window_id"]
    values = frame[names].to_numpy(dtype=np.float64)
    if len(values) % L_ser != 0:
        raise DataError(f"{path.name}: row count {len(values)} not a multiple of L_ser={L_ser}")
    windows = values.reshape(-1, L_ser, len(names))
    return WindowSet(windows=windows, L_ser=L_ser, stride=L_ser), names
