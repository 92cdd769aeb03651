"""Synthetic participants: duty-cycled sensor streams plus medication logs whose
adherence depends on planted context (location, late nights, weekends, dose
timing) through a logistic model.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sparsecast.errors import ConfigError
from sparsecast.ingest import (
    DAY,
    EventLog,
    MedicationEvent,
    SensorStream,
    local_date,
    local_midnight,
    write_event_csv,
    write_sensor_csv,
)

BLOCK_SECONDS = 10
SAMPLES_PER_BLOCK = 5
MAX_DOSE_SHIFT_MIN = 45.0
HOME_RADIUS_DEG = 0.001
DEFAULT_WEIGHTS = {"is_away": -1.5, "is_late_night": -1.0, "weekday": -0.5, "hours_to_prescribed": -0.5}

# stream tags for per-participant seed derivation
_PROFILE, _SENSOR, _EVENTS = 1, 2, 3


@dataclass(frozen=True)
class CohortConfig:
    n_participants: int = 22
    days_per_participant: int = 14
    doses_per_day: int | str = 1  # 1, 2 or "mixed"
    base_adherence: float = 0.8
    context_effect_strength: float = 1.0
    seed: int = 0
    utc_offset_hours: float = -7.0
    start_date: str = "2023-01-02"
    timing_bias_min: float = 0.0
    timing_jitter_min: float = 45.0
    two_dose_fraction: float = 0.25
    first_id: int = 0

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"{name}: {why}", field=name)

        if not isinstance(self.n_participants, (int, np.integer)) or self.n_participants < 1:
            bad("n_participants", "must be an integer >= 1")
        if not isinstance(self.days_per_participant, (int, np.integer)) or self.days_per_participant < 2:
            bad("days_per_participant", "must be an integer >= 2")
        if self.doses_per_day not in (1, 2, "mixed"):
            bad("doses_per_day", "must be 1, 2 or 'mixed'")
        if not 0.0 <= self.base_adherence <= 1.0:
            bad("base_adherence", "must lie in [0, 1]")
        if not self.context_effect_strength >= 0.0:
            bad("context_effect_strength", "must be >= 0")
        if self.timing_jitter_min < 0 or abs(self.timing_bias_min) + self.timing_jitter_min > MAX_DOSE_SHIFT_MIN:
            bad("timing_jitter_min", f"|timing_bias_min| + timing_jitter_min must be <= {MAX_DOSE_SHIFT_MIN:g}")
        if not 0.0 <= self.two_dose_fraction <= 1.0:
            bad("two_dose_fraction", "must lie in [0, 1]")
        try:
            dt.date.fromisoformat(self.start_date)
        except (TypeError, ValueError):
            bad("start_date", "must be an ISO date")
        if not -14 <= self.utc_offset_hours <= 14:
            bad("utc_offset_hours", "must lie in [-14, 14]")

    @property
    def utc_offset(self) -> int:
        return int(round(self.utc_offset_hours * 3600))

    @property
    def first_date(self) -> dt.date:
        return dt.date.fromisoformat(self.start_date)


@dataclass(frozen=True)
class BehaviorProfile:
    participant_id: int
    prescribed_hours: tuple
    home_location: tuple
    away_location: tuple
    away_probability_by_weekday: tuple
    late_activity_propensity: float
    adherence_logit_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    home_altitude: float = 330.0
    away_altitude: float = 350.0

    def __post_init__(self):
        hours = self.prescribed_hours
        if not 1 <= len(hours) <= 2 or len(set(hours)) != len(hours) or not all(0 <= h < 24 for h in hours):
            raise ConfigError(f"prescribed_hours invalid: {hours}", field="prescribed_hours")
        probs = list(self.away_probability_by_weekday) + [self.late_activity_propensity]
        if len(self.away_probability_by_weekday) != 7 or not all(0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("probabilities must lie in [0, 1]", field="away_probability_by_weekday")


@dataclass
class Cohort:
    config: CohortConfig
    profiles: list[BehaviorProfile]

    @property
    def participant_ids(self):
        return [p.participant_id for p in self.profiles]


def _rng(seed, pid, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(pid), tag]))


def gen_cohort(config: CohortConfig) -> Cohort:
    profiles = []
    for pid in range(config.first_id, config.first_id + config.n_participants):
        rng = _rng(config.seed, pid, _PROFILE)
        if config.doses_per_day == "mixed":
            n_doses = 2 if rng.random() < config.two_dose_fraction else 1
        else:
            n_doses = int(config.doses_per_day)
        first = int(rng.integers(0, 24))
        hours = (first,) if n_doses == 1 else tuple(sorted({first, (first + 12) % 24}))
        home = (33.45 + rng.uniform(-0.2, 0.2), -112.07 + rng.uniform(-0.2, 0.2))
        bearing = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.03, 0.15)
        away = (home[0] + dist * np.sin(bearing), home[1] + dist * np.cos(bearing))
        weekday_p = rng.uniform(0.15, 0.5, 5)
        weekend_p = rng.uniform(0.3, 0.7, 2)
        profiles.append(
            BehaviorProfile(
                participant_id=pid,
                prescribed_hours=hours,
                home_location=home,
                away_location=away,
                away_probability_by_weekday=tuple(float(p) for p in np.concatenate([weekday_p, weekend_p])),
                late_activity_propensity=float(rng.uniform(0.1, 0.4)),
                home_altitude=float(rng.uniform(300, 400)),
                away_altitude=float(rng.uniform(300, 450)),
            )
        )
    return Cohort(config, profiles)


def gen_day_context(profile: BehaviorProfile, days: int, first_date: dt.date, seed):
    """Per-day behaviour draws shared by the sensor and event generators."""
    rng = _rng(seed, profile.participant_id, _SENSOR)
    weekday = np.array([(first_date + dt.timedelta(days=d)).weekday() for d in range(days)])
    away_p = np.asarray(profile.away_probability_by_weekday)[weekday]
    is_away = rng.random(days) < away_p
    late = rng.random(days + 1) < profile.late_activity_propensity  # late[d]: the night before day d
    wake = 6.5 + rng.normal(0, 0.4, days) + 2.0 * late[:days]
    sleep = 22.5 + rng.normal(0, 0.4, days) + 2.0 * late[1:]
    away_start = 9.0 + rng.normal(0, 0.75, days)
    away_end = 17.5 + rng.normal(0, 1.0, days)
    return {
        "weekday": weekday,
        "is_away": is_away,
        "is_late_night": late[:days],
        "wake_hour": wake,
        "sleep_hour": sleep,
        "away_start_hour": away_start,
        "away_end_hour": away_end,
        "first_date": first_date,
        "rng": rng,
    }


def _jitter_in_disk(rng, n, radius):
    offsets = rng.normal(0, radius / 3.0, (n, 2))
    norm = np.hypot(offsets[:, 0], offsets[:, 1])
    scale = np.minimum(1.0, 0.95 * radius / np.maximum(norm, 1e-300))
    return offsets * scale[:, None]


def gen_sensor_stream(profile: BehaviorProfile, days: int, seed, *, first_date=None, utc_offset=-7 * 3600) -> SensorStream:
    """1 Hz samples, 5 s on / 5 s off, for ``days`` local days starting at local midnight."""
    if days < 1:
        raise ConfigError("days must be >= 1", field="days")
    first_date = first_date or dt.date(2023, 1, 2)
    ctx = gen_day_context(profile, days, first_date, seed)
    rng = ctx.pop("rng")

    n_blocks = days * DAY // BLOCK_SECONDS
    offsets = (np.arange(n_blocks)[:, None] * BLOCK_SECONDS + np.arange(SAMPLES_PER_BLOCK)).ravel()
    ts_local = local_midnight(first_date) + offsets
    ts_utc = ts_local - utc_offset
    n = offsets.size
    day = offsets // DAY
    hour = (offsets % DAY) / 3600.0

    prev_sleep = np.concatenate([[22.5], ctx["sleep_hour"][:-1]])
    awake = (hour >= ctx["wake_hour"][day]) & (hour < ctx["sleep_hour"][day])
    awake |= hour < (prev_sleep[day] - 24.0)
    activity = np.where(awake, 1.0, 0.1)

    away = ctx["is_away"][day] & (hour >= ctx["away_start_hour"][day]) & (hour < ctx["away_end_hour"][day])
    to_transit = np.abs(hour - ctx["away_start_hour"][day]) < 0.25
    from_transit = np.abs(hour - ctx["away_end_hour"][day]) < 0.25
    transit = ctx["is_away"][day] & (to_transit | from_transit)

    values = np.empty((n, 14))
    phase = rng.uniform(0, 2 * np.pi, 3)
    t = offsets / 3600.0
    for j in range(3):
        slow = 0.6 * np.sin(2 * np.pi * t / (3.0 + j) + phase[j])
        values[:, j] = slow + rng.normal(0, 1, n) * (0.02 + 0.25 * activity)
    values[:, 0] = np.angle(np.exp(1j * values[:, 0] * np.pi))  # yaw wraps to [-pi, pi]
    values[:, 3:6] = rng.normal(0, 1, (n, 3)) * (0.03 + 0.6 * activity)[:, None]
    values[:, 6:9] = rng.normal(0, 1, (n, 3)) * (0.01 + 0.15 * activity)[:, None]
    values[:, 8] -= 1.0  # gravity on z

    centre = np.where(away[:, None], np.asarray(profile.away_location), np.asarray(profile.home_location))
    values[:, 9:11] = centre + _jitter_in_disk(rng, n, HOME_RADIUS_DEG)
    values[:, 11] = np.where(away, profile.away_altitude, profile.home_altitude) + rng.normal(0, 2.0, n)
    values[:, 12] = np.clip(5.0 + np.abs(rng.normal(0, 6.0, n)), 3.0, 65.0)
    values[:, 13] = np.where(transit, rng.uniform(8.0, 16.0, n), np.abs(rng.normal(0, 0.3, n)) * activity)

    return SensorStream(ts_utc.astype(np.int64), ts_local.astype(np.int64), values, profile.participant_id, day_context=ctx)


def adherence_probability(profile: BehaviorProfile, config: CohortConfig, is_away, is_late_night, weekend, hour):
    """Probability that a dose is taken, given its context (vectorised)."""
    w = profile.adherence_logit_weights
    drive = (
        w["is_away"] * np.asarray(is_away, float)
        + w["is_late_night"] * np.asarray(is_late_night, float)
        + w["weekday"] * np.asarray(weekend, float)
        + w["hours_to_prescribed"] * (np.asarray(hour, float) - 12.0) / 12.0
    )
    base = config.base_adherence
    if base in (0.0, 1.0):
        return np.full(np.shape(drive), base)
    logit = np.log(base / (1.0 - base)) + config.context_effect_strength * drive
    return 1.0 / (1.0 + np.exp(-logit))


def gen_adherence_events(profile: BehaviorProfile, sensor: SensorStream, config: CohortConfig) -> EventLog:
    """Take/skip each prescribed dose of every day the sensor stream covers.

    Taken doses are stamped at the prescribed time shifted by
    ``timing_bias_min`` plus uniform jitter, never more than 45 minutes and
    never off the dose's local date. Skipped doses keep their prescribed time
    with no taken stamp.
    """
    ctx = sensor.day_context
    if ctx is None:
        raise ValueError("sensor stream carries no generator day context")
    rng = _rng(config.seed, profile.participant_id, _EVENTS)
    offset = sensor.utc_offset
    first_date = ctx["first_date"]
    days = len(ctx["is_away"])
    covered_until = local_date(sensor.ts_local[-1])
    events = []
    for d in range(days):
        date = first_date + dt.timedelta(days=d)
        if date > covered_until:
            break
        midnight_utc = local_midnight(date) - offset
        for hour in profile.prescribed_hours:
            prescribed = midnight_utc + int(round(hour * 3600))
            p_take = adherence_probability(
                profile, config, ctx["is_away"][d], ctx["is_late_night"][d], ctx["weekday"][d] >= 5, hour
            )
            take = rng.random() < p_take
            shift_min = config.timing_bias_min + rng.uniform(-config.timing_jitter_min, config.timing_jitter_min)
            if not take:
                events.append(MedicationEvent(date, prescribed))
                continue
            shift = int(round(np.clip(shift_min, -MAX_DOSE_SHIFT_MIN, MAX_DOSE_SHIFT_MIN) * 60))
            taken = int(np.clip(prescribed + shift, midnight_utc, midnight_utc + DAY - 1))
            events.append(MedicationEvent(date, prescribed, taken))
    return EventLog(events)


def participant_files(out_dir, pid):
    out_dir = Path(out_dir)
    return out_dir / f"p{pid:03d}_sensor.csv", out_dir / f"p{pid:03d}_events.csv"


def synthesize(config: CohortConfig, out_dir):
    """Generate the cohort and write one sensor and one event CSV per participant.

    Returns the cohort; participants are produced one at a time so only one
    stream is resident.
    """
    cohort = gen_cohort(config)
    for profile in cohort.profiles:
        sensor = gen_sensor_stream(
            profile,
            config.days_per_participant,
            config.seed,
            first_date=config.first_date,
            utc_offset=config.utc_offset,
        )
        events = gen_adherence_events(profile, sensor, config)
        sensor_path, event_path = participant_files(out_dir, profile.participant_id)
        write_sensor_csv(sensor, sensor_path)
        write_event_csv(events, event_path)
    return cohort
