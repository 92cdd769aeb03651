"""H/L/K feature derivation, feature-set selection, sliding windows,
chronological split, standardisation and the binary window container."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparsecast.errors import ConfigError, DataError, SchemaError
from sparsecast.ingest import DAY, SENSOR_CHANNELS, MergedSeries, event_context

log = logging.getLogger(__name__)

LOOKBACK_HOURS = (2, 3, 6, 12, 24)
HORIZON = 3600
WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")

H_COLUMNS = list(SENSOR_CHANNELS)
L_COLUMNS = (
    ["last_med_event", "last_prescribed_time", "last_event_hour"]
    + [f"dow_{d}" for d in WEEKDAYS]
    + [f"hour_{h:02d}" for h in range(24)]
    + [f"med_last_{h}h" for h in LOOKBACK_HOURS]
)
K_COLUMNS = ["relative_ts_utc", "relative_ts_local"] + [f"next_presc_hour_{h:02d}" for h in range(24)]
ALL_COLUMNS = H_COLUMNS + L_COLUMNS + K_COLUMNS
LOC_COLUMNS = ["lat", "lon"]
NUMERIC_COLUMNS = H_COLUMNS + ["last_prescribed_time", "last_event_hour", "relative_ts_utc", "relative_ts_local"]
ONE_HOT_GROUPS = {
    "day_of_week": [f"dow_{d}" for d in WEEKDAYS],
    "hour_of_day": [f"hour_{h:02d}" for h in range(24)],
    "next_prescribed_hour": [f"next_presc_hour_{h:02d}" for h in range(24)],
}
_COL = {name: i for i, name in enumerate(ALL_COLUMNS)}

# a dose counts toward "last medication event" if taken at most this long before its prescribed time
EARLY_DOSE_SLACK = 3600


# --- feature sets ----------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSetSpec:
    include_H: bool = True
    include_L: bool = False
    include_K: bool = False
    loc_only: bool = False

    def __post_init__(self):
        if not (self.include_H or self.include_L or self.include_K):
            raise ConfigError("feature set selects no block", field="features")
        if self.loc_only and not self.include_H:
            raise ConfigError("loc_only requires the H block", field="features")

    @classmethod
    def parse(cls, text: str) -> "FeatureSetSpec":
        """``"H+L+K"``, ``"H+K"``, ``"Loc+K"``, ... (case-insensitive)."""
        parts = [p.strip().upper() for p in text.split("+") if p.strip()]
        unknown = set(parts) - {"H", "L", "K", "LOC"}
        if unknown or not parts or len(set(parts)) != len(parts) or ("H" in parts and "LOC" in parts):
            raise ConfigError(f"unknown feature set {text!r}", field="features")
        loc = "LOC" in parts
        return cls(include_H="H" in parts or loc, include_L="L" in parts, include_K="K" in parts, loc_only=loc)

    @property
    def name(self) -> str:
        parts = ["Loc" if self.loc_only else "H"] if self.include_H else []
        parts += [b for b, on in (("L", self.include_L), ("K", self.include_K)) if on]
        return "+".join(parts)

    @property
    def columns(self) -> list[str]:
        cols = []
        if self.include_H:
            cols += LOC_COLUMNS if self.loc_only else H_COLUMNS
        if self.include_L:
            cols += L_COLUMNS
        if self.include_K:
            cols += K_COLUMNS
        return cols

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def __str__(self):
        return self.name


def column_indices(columns, available=ALL_COLUMNS):
    lookup = {name: i for i, name in enumerate(available)}
    try:
        return np.array([lookup[c] for c in columns], dtype=np.intp)
    except KeyError as exc:
        raise SchemaError(f"column {exc.args[0]} not available", column=exc.args[0]) from exc


# --- derivation --------------------------------------------------------------------


@dataclass
class EnrichedSeries:
    ts_utc: np.ndarray
    ts_local: np.ndarray
    X: np.ndarray  # (n, 79) in ALL_COLUMNS order
    y: np.ndarray  # medication in the next hour
    participant_id: int = 0
    columns: list = field(default_factory=lambda: list(ALL_COLUMNS))
    excluded: int = 0

    def __len__(self):
        return len(self.ts_utc)


def _count_in(timeline, lo, hi):
    """Number of timeline entries in (lo, hi] for each pair."""
    return np.searchsorted(timeline, hi, side="right") - np.searchsorted(timeline, lo, side="right")


def _local_hour(ts_local):
    return (np.asarray(ts_local, dtype=np.int64) % DAY) // 3600


def derive_features(merged: MergedSeries, *, taken_ts=None) -> EnrichedSeries:
    """Append the L and K blocks and the next-hour target to every record.

    ``taken_ts`` overrides the taken-event timeline (used by the leakage audit).
    """
    if len(merged) == 0:
        raise DataError("cannot derive features from an empty series")
    keep = np.ones(len(merged), dtype=bool)
    if np.issubdtype(merged.next_prescribed_ts.dtype, np.floating):
        keep = ~np.isnan(merged.next_prescribed_ts)
    excluded = int((~keep).sum())
    if excluded:
        log.warning("participant %s: %d records without a next prescribed dose excluded", merged.participant_id, excluded)
        merged = merged.take(keep)

    ts = merged.ts_utc.astype(np.int64)
    ts_local = merged.ts_local.astype(np.int64)
    offset = ts_local - ts
    taken = np.sort(np.asarray(merged.taken_ts if taken_ts is None else taken_ts, dtype=np.int64))
    prev_event, _, prev_presc, next_presc = event_context(ts, taken, merged.prescribed_ts)
    next_presc = next_presc.astype(np.int64)

    n = len(ts)
    X = np.zeros((n, len(ALL_COLUMNS)), dtype=np.float64)
    X[:, : len(H_COLUMNS)] = merged.values

    has_prev_presc = ~np.isnan(prev_presc)
    # most recent scheduled dose honoured by now (allowing an early dose)
    window_start = np.where(has_prev_presc, prev_presc, 0).astype(np.int64) - EARLY_DOSE_SLACK
    X[:, _COL["last_med_event"]] = has_prev_presc & (_count_in(taken, window_start - 1, ts) > 0)
    X[:, _COL["last_prescribed_time"]] = np.where(has_prev_presc, ts - np.nan_to_num(prev_presc), -1.0)
    has_prev_event = ~np.isnan(prev_event)
    prev_event_local = np.nan_to_num(prev_event).astype(np.int64) + offset
    X[:, _COL["last_event_hour"]] = np.where(has_prev_event, _local_hour(prev_event_local), -1)

    day_index = ts_local // DAY
    weekday = (day_index + 3) % 7  # 1970-01-01 was a Thursday
    X[np.arange(n), _COL["dow_mon"] + weekday] = 1.0
    X[np.arange(n), _COL["hour_00"] + _local_hour(ts_local)] = 1.0
    for h in LOOKBACK_HOURS:
        X[:, _COL[f"med_last_{h}h"]] = _count_in(taken, ts - h * 3600, ts) > 0

    X[:, _COL["relative_ts_utc"]] = next_presc - ts
    X[:, _COL["relative_ts_local"]] = next_presc - ts_local
    X[np.arange(n), _COL["next_presc_hour_00"] + _local_hour(next_presc + offset)] = 1.0

    y = (_count_in(taken, ts, ts + HORIZON) > 0).astype(np.uint8)
    return EnrichedSeries(ts, ts_local, X.astype(np.float32), y, merged.participant_id, excluded=excluded)


def select_features(X, spec: FeatureSetSpec, columns=ALL_COLUMNS):
    """Project the last axis of ``X`` onto the spec's columns."""
    return np.asarray(X)[..., column_indices(spec.columns, columns)]


def check_one_hot(X, columns=ALL_COLUMNS):
    for group, names in ONE_HOT_GROUPS.items():
        if names[0] not in columns:
            continue
        sums = np.asarray(X)[..., column_indices(names, columns)].sum(axis=-1)
        if not np.all(sums == 1.0):
            raise DataError(f"one-hot group {group} does not sum to 1")


def audit_leakage(merged: MergedSeries, n_probes=200, seed=0):
    """Check that no L/K column uses taken events after the record's own time.

    For each probe record the features are recomputed with every taken event
    later than the record deleted; L and K columns must be unchanged.
    Returns the number of probes checked; raises ``DataError`` on a leak.
    """
    full = derive_features(merged)
    rng = np.random.default_rng(seed)
    probes = np.sort(rng.choice(len(full), size=min(n_probes, len(full)), replace=False))
    lk = column_indices(L_COLUMNS + K_COLUMNS)
    for r in probes:
        one = merged.take(slice(r, r + 1))
        past_only = merged.taken_ts[merged.taken_ts <= merged.ts_utc[r]]
        redone = derive_features(one, taken_ts=past_only)
        if not np.array_equal(redone.X[0, lk], full.X[r, lk]):
            bad = [ALL_COLUMNS[i] for i in lk if redone.X[0, i] != full.X[r, i]]
            raise DataError(f"leakage: columns {bad} depend on future taken events (record {r})")
    return len(probes)


# --- windows ---------------------------------------------------------------------------


@dataclass
class WindowSet:
    """A stack of labelled windows, ``X`` of shape (n, window_len, n_features)."""

    X: np.ndarray
    y: np.ndarray
    participant: np.ndarray
    start_ts: np.ndarray
    end_ts: np.ndarray
    columns: list = field(default_factory=lambda: list(ALL_COLUMNS))
    synthetic: np.ndarray = None

    def __post_init__(self):
        n = len(self.X)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        for name in ("y", "participant", "start_ts", "end_ts", "synthetic"):
            if len(getattr(self, name)) != n:
                raise DataError(f"window set field {name} has wrong length")
        if self.X.ndim != 3 or self.X.shape[2] != len(self.columns):
            raise DataError(f"window matrix shape {self.X.shape} does not match {len(self.columns)} columns")

    def __len__(self):
        return len(self.X)

    @property
    def window_len(self):
        return self.X.shape[1]

    @property
    def nbytes(self):
        return int(sum(a.nbytes for a in (self.X, self.y, self.participant, self.start_ts, self.end_ts, self.synthetic)))

    def subset(self, index) -> "WindowSet":
        return WindowSet(self.X[index], self.y[index], self.participant[index], self.start_ts[index],
                         self.end_ts[index], list(self.columns), self.synthetic[index])

    def select(self, spec_or_columns) -> "WindowSet":
        cols = spec_or_columns.columns if isinstance(spec_or_columns, FeatureSetSpec) else list(spec_or_columns)
        idx = column_indices(cols, self.columns)
        return WindowSet(self.X[:, :, idx], self.y, self.participant, self.start_ts, self.end_ts, cols, self.synthetic)

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            raise DataError("nothing to concatenate")
        cols = sets[0].columns
        if any(s.columns != cols for s in sets):
            raise DataError("window sets disagree on columns")
        return cls(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.participant for s in sets]),
            np.concatenate([s.start_ts for s in sets]),
            np.concatenate([s.end_ts for s in sets]),
            list(cols),
            np.concatenate([s.synthetic for s in sets]),
        )

    @classmethod
    def empty(cls, window_len, columns=ALL_COLUMNS) -> "WindowSet":
        return cls(np.zeros((0, window_len, len(columns)), np.float32), np.zeros(0, np.uint8), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0, np.int64), list(columns))


def hop_length(window_len, overlap):
    if not 0.0 <= overlap < 1.0:
        raise ConfigError("overlap must lie in [0, 1)", field="overlap")
    return max(1, int(round(window_len * (1.0 - overlap))))


def window_starts(n, window_len, overlap=0.5):
    if n < window_len:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, n - window_len + 1, hop_length(window_len, overlap), dtype=np.int64)


def slide_windows(series: EnrichedSeries, window_len=1800, overlap=0.5) -> WindowSet:
    """Fixed-length windows labelled by the target of their final record."""
    starts = window_starts(len(series), window_len, overlap)
    if starts.size == 0:
        log.warning("participant %s: %d records, shorter than one window of %d", series.participant_id, len(series), window_len)
        return WindowSet.empty(window_len, series.columns)
    rows = starts[:, None] + np.arange(window_len)
    last = starts + window_len - 1
    return WindowSet(
        X=series.X[rows],
        y=series.y[last].astype(np.uint8),
        participant=np.full(starts.size, series.participant_id, dtype=np.int64),
        start_ts=series.ts_utc[starts],
        end_ts=series.ts_utc[last],
        columns=list(series.columns),
    )


def chronological_split(windows: WindowSet, train_frac=0.8):
    """Per participant: the first ceil(frac * n) windows by start time train, the rest test."""
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must lie in (0, 1)", field="train_frac")
    train_idx, test_idx = [], []
    for pid in np.unique(windows.participant):
        idx = np.flatnonzero(windows.participant == pid)
        idx = idx[np.argsort(windows.start_ts[idx], kind="stable")]
        if idx.size < 2:
            log.warning("participant %s: %d window(s), excluded from split", pid, idx.size)
            continue
        n_train = min(math.ceil(train_frac * idx.size - 1e-9), idx.size - 1)
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    if not train_idx:
        return windows.subset(np.zeros(0, np.intp)), windows.subset(np.zeros(0, np.intp))
    return windows.subset(np.concatenate(train_idx)), windows.subset(np.concatenate(test_idx))


# --- standardisation ------------------------------------------------------------------------


@dataclass
class Standardizer:
    """Zero-mean/unit-variance scaling of the numeric columns; others pass through."""

    columns: list
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, columns=ALL_COLUMNS):
        return cls(list(columns), np.zeros(len(columns)), np.ones(len(columns)))

    @classmethod
    def from_moments(cls, count, mean, m2, columns=ALL_COLUMNS):
        """Build from pooled ``(count, mean, sum of squared deviations)``."""
        mean = np.asarray(mean, dtype=np.float64)
        std = np.sqrt(np.maximum(np.asarray(m2, dtype=np.float64) / max(count, 1), 0.0))
        std[std < 1e-12] = 1.0
        numeric = np.isin(columns, NUMERIC_COLUMNS)
        mean = np.where(numeric, mean, 0.0)
        std = np.where(numeric, std, 1.0)
        return cls(list(columns), mean, std)

    def apply(self, X, columns=None):
        columns = self.columns if columns is None else columns
        idx = column_indices(columns, self.columns)
        out = (np.asarray(X, dtype=np.float64) - self.mean[idx]) / self.std[idx]
        return out.astype(np.asarray(X).dtype)

    def to_json(self):
        return {"columns": self.columns, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["columns"], np.asarray(obj["mean"]), np.asarray(obj["std"]))


def train_moments(series: EnrichedSeries, n_train_rows: int):
    """``(count, mean, m2)`` over the rows covered by training windows."""
    rows = series.X[:n_train_rows].astype(np.float64)
    if rows.shape[0] == 0:
        return 0, np.zeros(rows.shape[1]), np.zeros(rows.shape[1])
    mean = rows.mean(axis=0)
    return rows.shape[0], mean, ((rows - mean) ** 2).sum(axis=0)


def combine_moments(a, b):
    """Pool two ``(count, mean, m2)`` triples (parallel-variance update)."""
    n_a, mean_a, m2_a = a
    n_b, mean_b, m2_b = b
    n = n_a + n_b
    if n == 0:
        return a
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    return n, mean, m2_a + m2_b + delta * delta * (n_a * n_b / n)


# --- window container ----------------------------------------------------------------------------

CONTAINER_MAGIC = b"SCWIN"
CONTAINER_VERSION = 1


def write_windows(ws: WindowSet, path, **meta) -> Path:
    """Header (JSON: version, column names, dims) then the row-major float32
    window payload, uint8 labels and per-window metadata arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, L, F = ws.X.shape
    header = {
        "version": CONTAINER_VERSION,
        "columns": list(ws.columns),
        "n_windows": n,
        "window_len": L,
        "n_features": F,
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CONTAINER_MAGIC + struct.pack("<BI", CONTAINER_VERSION, len(blob)) + blob)
        fh.write(np.ascontiguousarray(ws.X, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ws.y, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ws.participant, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ws.start_ts, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ws.end_ts, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ws.synthetic, dtype=np.uint8).tobytes())
    tmp.replace(path)
    return path


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CONTAINER_MAGIC))
        if magic != CONTAINER_MAGIC:
            raise SchemaError(f"{path}: not a window container")
        version, size = struct.unpack("<BI", fh.read(5))
        if version != CONTAINER_VERSION:
            raise SchemaError(f"{path}: unsupported container version {version}")
        header = json.loads(fh.read(size).decode("utf-8"))
        header["_offset"] = len(CONTAINER_MAGIC) + 5 + size
    return header


def read_windows(path, columns=None) -> WindowSet:
    """Load a container, optionally keeping only ``columns`` (memory-mapped projection)."""
    header = read_header(path)
    n, L, F = header["n_windows"], header["window_len"], header["n_features"]
    off = header["_offset"]
    X = np.memmap(path, dtype="<f4", mode="r", offset=off, shape=(n, L, F)) if n else np.zeros((0, L, F), "<f4")
    off += 4 * n * L * F
    raw = np.fromfile(path, dtype=np.uint8, offset=off)
    expected = n + 3 * 8 * n + n
    if raw.size != expected:
        raise SchemaError(f"{path}: truncated payload")
    y = raw[:n].copy()
    tail = raw[n : n + 24 * n].view("<i8").reshape(3, n)
    synthetic = raw[n + 24 * n :].astype(bool)
    all_cols = header["columns"]
    if columns is None:
        columns = all_cols
        X = np.array(X, dtype=np.float32)
    else:
        columns = list(columns)
        X = np.array(X[:, :, column_indices(columns, all_cols)], dtype=np.float32)
    return WindowSet(X, y, tail[0].astype(np.int64), tail[1].astype(np.int64), tail[2].astype(np.int64),
                     columns, synthetic)
