import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import sparsecast.features as features
from sparsecast.errors import ConfigError, DataError, SchemaError
from sparsecast.features import (
    ALL_COLUMNS,
    H_COLUMNS,
    K_COLUMNS,
    L_COLUMNS,
    NUMERIC_COLUMNS,
    FeatureSetSpec,
    Standardizer,
    WindowSet,
    audit_leakage,
    check_one_hot,
    chronological_split,
    combine_moments,
    derive_features,
    hop_length,
    read_header,
    read_windows,
    select_features,
    slide_windows,
    train_moments,
    window_starts,
    write_windows,
)
from tests.helpers import make_windows

COL = {c: i for i, c in enumerate(ALL_COLUMNS)}


def test_block_dimensions():
    assert (len(H_COLUMNS), len(L_COLUMNS), len(K_COLUMNS)) == (14, 39, 26)
    assert len(ALL_COLUMNS) == len(set(ALL_COLUMNS)) == 79


@pytest.mark.parametrize("text,name,n", [
    ("H", "H", 14), ("H+K", "H+K", 40), ("H+L", "H+L", 53), ("H+L+K", "H+L+K", 79),
    ("loc", "Loc", 2), ("Loc+K", "Loc+K", 28), ("k+h", "H+K", 40), ("L+K", "L+K", 65),
])
def test_feature_set_parsing(text, name, n):
    spec = FeatureSetSpec.parse(text)
    assert spec.name == name and spec.n_features == n


@pytest.mark.parametrize("text", ["", "H+X", "H+H", "H+Loc"])
def test_feature_set_parse_errors(text):
    with pytest.raises(ConfigError):
        FeatureSetSpec.parse(text)


def test_select_features_projects_named_columns():
    X = np.tile(np.arange(79.0), (2, 3, 1))
    out = select_features(X, FeatureSetSpec.parse("Loc+K"))
    assert out.shape == (2, 3, 28)
    np.testing.assert_array_equal(out[0, 0, :2], [COL["lat"], COL["lon"]])


# --- derivation oracles --------------------------------------------------------------------


@pytest.fixture(scope="module")
def enriched(small_merged):
    return derive_features(small_merged)


def _row_oracle(merged, r):
    """Brute-force scans over the event lists for one record."""
    t = int(merged.ts_utc[r])
    offset = int(merged.ts_local[r]) - t
    taken = [int(v) for v in merged.taken_ts]
    presc = [int(v) for v in merged.prescribed_ts]
    out = {}
    for h in (2, 3, 6, 12, 24):
        out[f"med_last_{h}h"] = float(any(t - h * 3600 < e <= t for e in taken))
    prev_p = [p for p in presc if p <= t]
    next_p = min(p for p in presc if p > t)
    prev_e = [e for e in taken if e <= t]
    out["last_prescribed_time"] = float(t - max(prev_p)) if prev_p else -1.0
    out["last_med_event"] = float(bool(prev_p) and any(max(prev_p) - 3600 <= e <= t for e in taken))
    out["last_event_hour"] = float(((max(prev_e) + offset) % 86400) // 3600) if prev_e else -1.0
    out["relative_ts_utc"] = float(next_p - t)
    out["relative_ts_local"] = float(next_p - (t + offset))
    out[f"next_presc_hour_{((next_p + offset) % 86400) // 3600:02d}"] = 1.0
    out[f"hour_{((t + offset) % 86400) // 3600:02d}"] = 1.0
    out["target"] = int(any(t < e <= t + 3600 for e in taken))
    return out


def test_lookback_and_knowledge_columns_match_brute_force(small_merged, enriched):
    rng = np.random.default_rng(0)
    rows = rng.choice(len(enriched), 300, replace=False)
    near_events = [np.argmin(np.abs(small_merged.ts_utc - e)) for e in small_merged.taken_ts]
    for r in list(rows) + near_events:
        expected = _row_oracle(small_merged, r)
        assert enriched.y[r] == expected.pop("target"), r
        for col, value in expected.items():
            assert enriched.X[r, COL[col]] == pytest.approx(value, abs=1e-3 * max(1.0, abs(value))), (r, col)


def test_sensor_block_passes_through(small_merged, enriched):
    np.testing.assert_array_equal(enriched.X[:, :14], small_merged.values.astype(np.float32))


def test_one_hot_groups_are_exclusive(enriched):
    check_one_hot(enriched.X)
    broken = enriched.X[:5].copy()
    broken[0, COL["hour_03"]] += 1
    with pytest.raises(DataError):
        check_one_hot(broken)


def test_calendar_one_hot_matches_datetime(enriched):
    import datetime as dt

    for r in (0, len(enriched) // 2, len(enriched) - 1):
        local = dt.datetime(1970, 1, 1) + dt.timedelta(seconds=int(enriched.ts_local[r]))
        assert enriched.X[r, COL[f"dow_{features.WEEKDAYS[local.weekday()]}"]] == 1
        assert enriched.X[r, COL[f"hour_{local.hour:02d}"]] == 1


def test_leakage_audit_passes(small_merged):
    assert audit_leakage(small_merged, n_probes=40, seed=1) == 40


def test_leakage_audit_catches_a_feature_that_peeks(small_merged, monkeypatch):
    real = features.event_context

    def peeking(ts, taken, prescribed):
        prev_event, next_event, prev_presc, next_presc = real(ts, taken, prescribed)
        return np.where(np.isnan(next_event), prev_event, next_event), next_event, prev_presc, next_presc

    monkeypatch.setattr(features, "event_context", peeking)
    with pytest.raises(DataError, match="leakage"):
        audit_leakage(small_merged, n_probes=40, seed=1)


# --- windows ----------------------------------------------------------------------------------


@given(st.integers(0, 400), st.integers(1, 60), st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_window_starts_match_enumeration(n, window_len, overlap):
    hop = hop_length(window_len, overlap)
    expected = [s for s in range(n) if s % hop == 0 and s + window_len <= n]
    assert list(window_starts(n, window_len, overlap)) == expected


def test_window_count_closed_form():
    # 1800-long windows with 50% overlap over one duty-cycled day
    assert len(window_starts(43_200, 1800, 0.5)) == (43_200 - 1800) // 900 + 1 == 47


def test_slide_windows_shape_and_final_record_label(enriched):
    ws = slide_windows(enriched, window_len=30, overlap=0.5)
    assert ws.X.shape[1:] == (30, 79)
    starts = window_starts(len(enriched), 30, 0.5)
    assert len(ws) == len(starts)
    np.testing.assert_array_equal(ws.y, enriched.y[starts + 29])
    np.testing.assert_array_equal(ws.X[3], enriched.X[starts[3] : starts[3] + 30])
    np.testing.assert_array_equal(ws.end_ts, enriched.ts_utc[starts + 29])


def test_short_series_yields_no_windows(enriched):
    short = features.EnrichedSeries(enriched.ts_utc[:10], enriched.ts_local[:10], enriched.X[:10], enriched.y[:10])
    assert len(slide_windows(short, window_len=30)) == 0


@given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.sampled_from([0.5, 0.7, 0.8, 0.9]))
def test_chronological_split_per_participant(sizes, frac):
    parts, start = [], []
    rng = np.random.default_rng(len(sizes))
    for pid, n in enumerate(sizes):
        parts += [pid] * n
        start += list(rng.permutation(n) * 10)
    n = len(parts)
    ws = WindowSet(np.zeros((n, 2, 1)), np.zeros(n, np.uint8), np.array(parts), np.array(start),
                   np.array(start) + 5, ["a"])
    train, test = chronological_split(ws, frac)
    for pid, size in enumerate(sizes):
        tr = train.start_ts[train.participant == pid]
        te = test.start_ts[test.participant == pid]
        if size < 2:
            assert tr.size == te.size == 0
            continue
        assert tr.size == min(math.ceil(frac * size - 1e-9), size - 1)
        assert tr.size + te.size == size and te.size >= 1
        assert tr.max() < te.min()


def test_chronological_split_rejects_bad_fraction():
    with pytest.raises(ConfigError):
        chronological_split(make_windows(10), 1.0)


# --- standardisation ----------------------------------------------------------------------


def test_standardizer_pools_train_rows_and_skips_indicators(enriched):
    n_rows = len(enriched) // 2
    half = n_rows // 3
    first = train_moments(enriched, half)
    rest = enriched.X[half:n_rows].astype(np.float64)
    rest_moments = (len(rest), rest.mean(axis=0), ((rest - rest.mean(axis=0)) ** 2).sum(axis=0))
    scaler = Standardizer.from_moments(*combine_moments(first, rest_moments))
    rows = enriched.X[:n_rows].astype(np.float64)
    out = scaler.apply(rows)
    numeric = [COL[c] for c in NUMERIC_COLUMNS if rows[:, COL[c]].std() > 1e-9]
    np.testing.assert_allclose(out[:, numeric].mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(out[:, numeric].std(axis=0), 1.0, atol=1e-6)
    indicator = [i for i, c in enumerate(ALL_COLUMNS) if c not in NUMERIC_COLUMNS]
    np.testing.assert_array_equal(out[:, indicator], rows[:, indicator])
    back = Standardizer.from_json(scaler.to_json())
    np.testing.assert_array_equal(back.apply(rows), out)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.integers(0, 30))
def test_combined_moments_equal_direct_moments(values, cut):
    x = np.array(values)[:, None]
    cut = min(cut, len(x))
    parts = [x[:cut], x[cut:]]
    moments = [(len(p), p.mean(axis=0) if len(p) else np.zeros(1), ((p - p.mean(axis=0)) ** 2).sum(axis=0) if len(p) else np.zeros(1)) for p in parts]
    n, mean, m2 = combine_moments(*moments)
    assert n == len(x)
    np.testing.assert_allclose(mean, x.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(m2, ((x - x.mean(axis=0)) ** 2).sum(axis=0), rtol=1e-9, atol=1e-6)


def test_standardizer_handles_constant_columns():
    scaler = Standardizer.from_moments(4, np.full(79, 2.0), np.zeros(79))
    assert np.all(scaler.std == 1.0)


# --- container ---------------------------------------------------------------------------------


def test_container_round_trip_and_projection(tmp_path, enriched):
    ws = slide_windows(enriched, window_len=20, overlap=0.5)
    ws.synthetic[::3] = True
    path = write_windows(ws, tmp_path / "w.scw", split="train")
    back = read_windows(path)
    for name in ("X", "y", "participant", "start_ts", "end_ts", "synthetic"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ws, name))
    assert back.columns == list(ALL_COLUMNS)
    assert read_header(path)["meta"] == {"split": "train"}
    spec = FeatureSetSpec.parse("H+K")
    proj = read_windows(path, spec.columns)
    np.testing.assert_array_equal(proj.X, ws.select(spec).X)


def test_container_rejects_foreign_and_truncated_files(tmp_path):
    bad = tmp_path / "x.scw"
    bad.write_bytes(b"not a container")
    with pytest.raises(SchemaError):
        read_windows(bad)
    path = write_windows(make_windows(5, dtype=np.float32), tmp_path / "ok.scw")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(SchemaError):
        read_windows(path)


def test_empty_container_round_trip(tmp_path):
    empty = WindowSet.empty(12)
    back = read_windows(write_windows(empty, tmp_path / "e.scw"))
    assert len(back) == 0 and back.window_len == 12


def test_window_set_validation():
    with pytest.raises(DataError):
        WindowSet(np.zeros((2, 3, 4)), np.zeros(3), np.zeros(2), np.zeros(2), np.zeros(2), ["a", "b", "c", "d"])
    with pytest.raises(DataError):
        WindowSet.concat([make_windows(3, n_features=2), make_windows(3, n_features=3)])
