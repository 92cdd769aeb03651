"""Per-participant preparation (merge -> derive -> window -> split ->
standardise -> balance) and access to the prepared window containers."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from sparsecast.balance import AdasynConfig, adasyn
from sparsecast.cohort import Cohort, gen_adherence_events, gen_sensor_stream, participant_files
from sparsecast.errors import BalanceError, DataError, MissingArtifactError
from sparsecast.features import (
    ALL_COLUMNS,
    FeatureSetSpec,
    Standardizer,
    WindowSet,
    audit_leakage,
    check_one_hot,
    chronological_split,
    combine_moments,
    derive_features,
    read_windows,
    slide_windows,
    train_moments,
    write_windows,
)
from sparsecast.ingest import DAY, load_event_csv, load_sensor_csv, local_date, merge_streams

log = logging.getLogger(__name__)

STAGES = ("merge", "derive", "window", "split", "standardize", "balance")


@dataclass(frozen=True)
class PrepareConfig:
    window_len: int = 1800
    overlap: float = 0.5
    sample_stride: int = 1  # keep every n-th merged record before windowing
    train_frac: float = 0.8
    leakage_probes: int = 0


# --- sources ------------------------------------------------------------------------


def csv_source(data_dir, pid):
    """Loader for one participant's CSV pair; absent days are filled from the
    participant's fixed prescribed hours as missed doses."""

    def load():
        sensor_path, event_path = participant_files(data_dir, pid)
        for path in (sensor_path, event_path):
            if not path.exists():
                raise MissingArtifactError(path, "synth")
        sensor = load_sensor_csv(sensor_path, participant_id=pid)
        offset = sensor.utc_offset
        raw = load_event_csv(event_path, utc_offset=offset)
        hours = sorted({((e.prescribed_ts + offset) % DAY) / 3600 for e in raw.events})
        if not hours:
            raise DataError(f"{event_path}: no prescribed times to reconstruct the schedule from")
        first = local_date(sensor.ts_local[0])
        n_days = (local_date(sensor.ts_local[-1]) - first).days + 1
        events = load_event_csv(event_path, span=(first, n_days), prescribed_hours=hours, utc_offset=offset)
        return sensor, events

    return load


def generated_source(cohort: Cohort, profile):
    """Loader that synthesises a participant in memory (no CSV round trip)."""

    def load():
        cfg = cohort.config
        sensor = gen_sensor_stream(profile, cfg.days_per_participant, cfg.seed,
                                   first_date=cfg.first_date, utc_offset=cfg.utc_offset)
        return sensor, gen_adherence_events(profile, sensor, cfg)

    return load


# --- preparation ----------------------------------------------------------------------------


def balance_split(ws: WindowSet, cfg: AdasynConfig, seed):
    """ADASYN with the neighbour count reduced when the minority is too small.

    Returns ``(windows, note)``; sets with a single class are returned as is.
    """
    counts = np.bincount(ws.y.astype(np.int64), minlength=2)
    if len(ws) == 0 or counts.min() == 0:
        return ws, "single class; left unbalanced"
    k = cfg.k
    if counts.min() < k + 1:
        k = int(counts.min()) - 1
        if k < 1:
            return ws, f"minority of {counts.min()}; left unbalanced"
    try:
        result = adasyn(ws, AdasynConfig(k=k, beta=cfg.beta, seed=seed))
    except BalanceError as exc:
        return ws, f"not balanced: {exc}"
    note = "balanced" if k == cfg.k else f"balanced with k={k}"
    return result.windows, note


def prepare(sources, out_dir, cfg: PrepareConfig = PrepareConfig(), adasyn_cfg: AdasynConfig = AdasynConfig()):
    """Prepare every participant and write ``p###_{train,test}.scw`` containers.

    ``sources`` maps participant id -> loader returning ``(SensorStream, EventLog)``.
    Standardisation statistics pool the training rows of all participants.
    """
    out_dir = Path(out_dir)
    stash = out_dir / "_raw"
    stash.mkdir(parents=True, exist_ok=True)
    stage_log = []
    moments = (0, np.zeros(len(ALL_COLUMNS)), np.zeros(len(ALL_COLUMNS)))
    participants = {}

    for pid, load in sorted(sources.items()):
        sensor, events = load()
        merged = merge_streams(sensor, events)
        del sensor
        merged = merged.decimate(cfg.sample_stride)
        stage_log.append((pid, "merge"))
        if cfg.leakage_probes:
            audit_leakage(merged, n_probes=cfg.leakage_probes, seed=pid)
        series = derive_features(merged)
        check_one_hot(series.X)
        stage_log.append((pid, "derive"))
        windows = slide_windows(series, cfg.window_len, cfg.overlap)
        stage_log.append((pid, "window"))
        train, test = chronological_split(windows, cfg.train_frac)
        stage_log.append((pid, "split"))
        if len(train) == 0:
            log.warning("participant %s contributes no windows", pid)
            continue
        n_rows = int(np.searchsorted(series.ts_utc, train.end_ts.max(), side="right"))
        moments = combine_moments(moments, train_moments(series, n_rows))
        write_windows(train, stash / f"p{pid:03d}_train.scw")
        write_windows(test, stash / f"p{pid:03d}_test.scw")
        participants[pid] = {"records": len(series), "windows": len(windows),
                             "positive_rate": float(series.y.mean())}
        del merged, series, windows, train, test

    scaler = Standardizer.from_moments(*moments)
    (out_dir / "standardizer.json").write_text(json.dumps(scaler.to_json()), encoding="utf-8")
    for pid in participants:
        for split_no, split in enumerate(("train", "test")):
            raw_path = stash / f"p{pid:03d}_{split}.scw"
            ws = read_windows(raw_path)
            ws.X = scaler.apply(ws.X)
            stage_log.append((pid, f"standardize:{split}"))
            seed = int(np.random.SeedSequence([adasyn_cfg.seed, pid, split_no]).generate_state(1)[0])
            balanced, note = balance_split(ws, adasyn_cfg, seed)
            stage_log.append((pid, f"balance:{split}"))
            write_windows(balanced, out_dir / f"p{pid:03d}_{split}.scw", participant=pid, split=split, balance=note)
            participants[pid][f"{split}_windows"] = len(balanced)
            participants[pid][f"{split}_positive"] = int(balanced.y.sum())
            participants[pid][f"{split}_balance"] = note
            raw_path.unlink()
    stash.rmdir()
    manifest = {
        "participants": {str(k): v for k, v in participants.items()},
        "prepare": asdict(cfg),
        "adasyn": asdict(adasyn_cfg),
        "stage_log": [list(s) for s in stage_log],
        "columns": list(ALL_COLUMNS),
    }
    (out_dir / "prepared.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return PreparedData(out_dir)


class PreparedData:
    """Read access to a prepared directory; loads only requested participants and columns."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "prepared.json"
        if not manifest.exists():
            raise MissingArtifactError(manifest, "prepare")
        self.manifest = json.loads(manifest.read_text(encoding="utf-8"))
        self.participants = sorted(int(k) for k in self.manifest["participants"])
        self.window_len = self.manifest["prepare"]["window_len"]

    def path(self, pid, split):
        return self.root / f"p{int(pid):03d}_{split}.scw"

    def load(self, pids, split, spec: FeatureSetSpec | None = None) -> WindowSet:
        columns = spec.columns if spec is not None else None
        sets = [read_windows(self.path(pid, split), columns) for pid in pids]
        return WindowSet.concat(sets)

    def loader(self, pids, split, spec=None):
        pids = list(pids)
        return lambda: self.load(pids, split, spec)

    def stage_order(self, pid):
        return [stage for p, stage in self.manifest["stage_log"] if p == pid]
