"""Canonical sensor/event CSV formats and the per-second merge with event context."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from sparsecast.errors import DataError, MergeError, SchemaError

log = logging.getLogger(__name__)

SENSOR_CHANNELS = [
    "yaw", "pitch", "roll",
    "rot_x", "rot_y", "rot_z",
    "acc_x", "acc_y", "acc_z",
    "lat", "lon",
    "altitude", "h_accuracy", "speed",
]
SENSOR_HEADER = ["ts_utc", "ts_local"] + SENSOR_CHANNELS
OPTIONAL_SENSOR_COLUMNS = ["v_accuracy"]
EVENT_HEADER = ["date", "taken_ts", "prescribed_ts"]
FLOAT_FORMAT = "%.6f"
DAY = 86400


@dataclass
class SensorStream:
    ts_utc: np.ndarray
    ts_local: np.ndarray
    values: np.ndarray  # (n, 14) in SENSOR_CHANNELS order
    participant_id: int = 0
    # generator-side ground truth (per-day away / late-night flags); never written to disk
    day_context: dict | None = None

    def __len__(self):
        return len(self.ts_utc)

    @property
    def utc_offset(self) -> int:
        return int(self.ts_local[0] - self.ts_utc[0]) if len(self) else 0

    def channel(self, name):
        return self.values[:, SENSOR_CHANNELS.index(name)]


@dataclass(frozen=True)
class MedicationEvent:
    date: dt.date
    prescribed_ts: int
    taken_ts: int | None = None


@dataclass
class EventLog:
    events: list[MedicationEvent] = field(default_factory=list)

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.prescribed_ts)

    def __len__(self):
        return len(self.events)

    @property
    def days(self):
        return sorted({e.date for e in self.events})

    @property
    def prescribed_ts(self):
        return np.array([e.prescribed_ts for e in self.events], dtype=np.int64)

    @property
    def taken_ts(self):
        return np.array(sorted(e.taken_ts for e in self.events if e.taken_ts is not None), dtype=np.int64)


def local_date(ts_local) -> dt.date:
    return dt.date(1970, 1, 1) + dt.timedelta(days=int(ts_local) // DAY)


def local_midnight(date: dt.date) -> int:
    return (date - dt.date(1970, 1, 1)).days * DAY


# --- sensor CSV --------------------------------------------------------------


def load_sensor_csv(path, participant_id=0) -> SensorStream:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: empty sensor file") from exc
    missing = [c for c in SENSOR_HEADER if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing sensor column(s) {', '.join(missing)}", column=missing[0])
    unknown = set(frame.columns) - set(SENSOR_HEADER) - set(OPTIONAL_SENSOR_COLUMNS)
    if unknown:
        raise SchemaError(f"{path}: unexpected column(s) {', '.join(sorted(unknown))}", column=sorted(unknown)[0])
    if frame[SENSOR_HEADER].isna().any().any():
        row = int(np.flatnonzero(frame[SENSOR_HEADER].isna().any(axis=1).to_numpy())[0]) + 1
        raise DataError(f"{path}: empty value in data row {row}", row=row)
    ts = frame["ts_utc"].to_numpy(dtype=np.int64)
    bad = np.flatnonzero(np.diff(ts) <= 0)
    if bad.size:
        row = int(bad[0]) + 2
        kind = "duplicate" if ts[bad[0] + 1] == ts[bad[0]] else "non-monotonic"
        raise DataError(f"{path}: {kind} timestamp at data row {row}", row=row)
    values = frame[SENSOR_CHANNELS].to_numpy(dtype=np.float64)
    lat, lon = values[:, 9], values[:, 10]
    out = np.flatnonzero((np.abs(lat) > 90) | (np.abs(lon) > 180))
    if out.size:
        row = int(out[0]) + 1
        raise DataError(f"{path}: coordinates out of range in data row {row}", row=row)
    return SensorStream(ts, frame["ts_local"].to_numpy(dtype=np.int64), values, participant_id)


def write_sensor_csv(stream: SensorStream, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(stream.values, columns=SENSOR_CHANNELS)
    frame.insert(0, "ts_local", stream.ts_local)
    frame.insert(0, "ts_utc", stream.ts_utc)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    return path


# --- event CSV -----------------------------------------------------------------


def load_event_csv(path, *, span=None, prescribed_hours=None, utc_offset=None) -> EventLog:
    """Parse an event file.

    ``span = (first_date, n_days)`` together with the participant's fixed
    ``prescribed_hours`` and ``utc_offset`` (seconds) fills every day missing
    from the file with untaken doses: no record means no medication.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        header = list(EVENT_HEADER)
    missing = [c for c in EVENT_HEADER if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing event column(s) {', '.join(missing)}", column=missing[0])
    col = {name: header.index(name) for name in EVENT_HEADER}
    events = []
    for row_no, row in enumerate(reader, start=1):
        if not row:
            continue
        try:
            date = dt.date.fromisoformat(row[col["date"]])
        except ValueError as exc:
            raise DataError(f"{path}: bad date in data row {row_no}", row=row_no) from exc
        presc = row[col["prescribed_ts"]].strip()
        if not presc:
            raise DataError(f"{path}: prescribed_ts missing in data row {row_no}", row=row_no)
        taken = row[col["taken_ts"]].strip()
        event = MedicationEvent(date, int(presc), int(taken) if taken else None)
        if utc_offset is not None:
            for ts in (event.prescribed_ts, event.taken_ts):
                if ts is not None and local_date(ts + utc_offset) != date:
                    raise DataError(f"{path}: timestamp off its date in data row {row_no}", row=row_no)
        events.append(event)

    if span is not None:
        if prescribed_hours is None or utc_offset is None:
            raise ValueError("span reconstruction needs prescribed_hours and utc_offset")
        first, n_days = span
        present = {e.date for e in events}
        for d in range(n_days):
            date = first + dt.timedelta(days=d)
            if date in present:
                continue
            for hour in prescribed_hours:
                presc = local_midnight(date) + int(round(hour * 3600)) - utc_offset
                events.append(MedicationEvent(date, presc, None))
    return EventLog(events)


def write_event_csv(log_: EventLog, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(EVENT_HEADER)]
    for e in log_.events:
        taken = "" if e.taken_ts is None else str(e.taken_ts)
        lines.append(f"{e.date.isoformat()},{taken},{e.prescribed_ts}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- merge -------------------------------------------------------------------------


@dataclass
class MergedSeries:
    """One row per retained sensor sample plus previous/next event context.

    Optional timestamps are float64 with NaN for "absent".
    """

    ts_utc: np.ndarray
    ts_local: np.ndarray
    values: np.ndarray
    prev_event_ts: np.ndarray
    prev_prescribed_ts: np.ndarray
    next_event_ts: np.ndarray
    next_prescribed_ts: np.ndarray
    taken_ts: np.ndarray  # full sorted timeline of taken doses
    prescribed_ts: np.ndarray
    participant_id: int = 0
    dropped: int = 0

    def __len__(self):
        return len(self.ts_utc)

    def take(self, index) -> "MergedSeries":
        per_row = ("ts_utc", "ts_local", "values", "prev_event_ts", "prev_prescribed_ts", "next_event_ts", "next_prescribed_ts")
        fields = {name: getattr(self, name)[index] for name in per_row}
        return MergedSeries(**fields, taken_ts=self.taken_ts, prescribed_ts=self.prescribed_ts,
                            participant_id=self.participant_id, dropped=self.dropped)

    def decimate(self, every: int) -> "MergedSeries":
        if every <= 1:
            return self
        return self.take(slice(None, None, every))


def event_context(ts, taken, prescribed):
    """prev (<= ts) / next (> ts) taken and prescribed times by binary search."""
    ts = np.asarray(ts, dtype=np.int64)

    def around(timeline):
        timeline = np.asarray(timeline, dtype=np.int64)
        k = np.searchsorted(timeline, ts, side="right")
        prev = np.full(ts.shape, np.nan)
        nxt = np.full(ts.shape, np.nan)
        has_prev = k > 0
        prev[has_prev] = timeline[k[has_prev] - 1]
        has_next = k < timeline.size
        nxt[has_next] = timeline[k[has_next]]
        return prev, nxt

    prev_event, next_event = around(taken)
    prev_presc, next_presc = around(prescribed)
    return prev_event, next_event, prev_presc, next_presc


def merge_streams(sensor: SensorStream, events: EventLog) -> MergedSeries:
    prescribed = events.prescribed_ts
    taken = events.taken_ts
    if len(sensor) == 0 or prescribed.size == 0:
        raise MergeError("nothing to merge: empty sensor stream or event log")
    span_start = int(prescribed.min()) - DAY
    span_end = int(prescribed.max())
    if sensor.ts_utc[-1] < span_start or sensor.ts_utc[0] >= span_end:
        raise MergeError(
            f"sensor span [{sensor.ts_utc[0]}, {sensor.ts_utc[-1]}] does not overlap "
            f"event span [{span_start}, {span_end})"
        )
    prev_event, next_event, prev_presc, next_presc = event_context(sensor.ts_utc, taken, prescribed)
    keep = ~np.isnan(next_presc)
    dropped = int((~keep).sum())
    if dropped:
        log.info("participant %s: dropped %d samples after the final prescribed dose", sensor.participant_id, dropped)
    return MergedSeries(
        ts_utc=sensor.ts_utc[keep],
        ts_local=sensor.ts_local[keep],
        values=sensor.values[keep],
        prev_event_ts=prev_event[keep],
        prev_prescribed_ts=prev_presc[keep],
        next_event_ts=next_event[keep],
        next_prescribed_ts=next_presc[keep].astype(np.int64),
        taken_ts=taken,
        prescribed_ts=np.sort(prescribed),
        participant_id=sensor.participant_id,
        dropped=dropped,
    )
