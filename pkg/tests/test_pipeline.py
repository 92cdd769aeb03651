import json

import numpy as np
import pytest

from sparsecast.cohort import CohortConfig, gen_cohort, synthesize
from sparsecast.errors import MissingArtifactError
from sparsecast.features import FeatureSetSpec, NUMERIC_COLUMNS, ALL_COLUMNS
from sparsecast.ingest import merge_streams
from sparsecast.pipeline import STAGES, PreparedData, csv_source, generated_source


def test_stages_run_in_order_for_every_participant(tiny_prepared):
    for pid in tiny_prepared.participants:
        order = tiny_prepared.stage_order(pid)
        assert order == ["merge", "derive", "window", "split", "standardize:train", "balance:train",
                         "standardize:test", "balance:test"]
        assert order.index("split") < order.index("balance:train")
    assert all(any(s.startswith(stage) for s in order) for stage in STAGES)


def test_prepared_windows_have_full_width_and_chronology(tiny_prepared):
    for pid in tiny_prepared.participants:
        train = tiny_prepared.load([pid], "train")
        test = tiny_prepared.load([pid], "test")
        assert train.X.shape[1:] == (20, 79) and test.X.shape[1:] == (20, 79)
        assert train.start_ts.max() < test.start_ts[~test.synthetic].min()
        assert np.all(train.participant == pid)


def test_train_splits_are_balanced_or_explained(tiny_prepared):
    for pid, info in tiny_prepared.manifest["participants"].items():
        train = tiny_prepared.load([int(pid)], "train")
        if info["train_balance"].startswith("balanced"):
            assert abs(int(train.y.sum()) * 2 - len(train)) <= 1
        else:
            assert "unbalanced" in info["train_balance"]


def test_indicator_columns_survive_standardisation(tiny_prepared):
    ws = tiny_prepared.load(tiny_prepared.participants, "train")
    originals = ws.X[~ws.synthetic]
    indicator = [i for i, c in enumerate(ALL_COLUMNS) if c not in NUMERIC_COLUMNS]
    assert set(np.unique(originals[:, :, indicator])) <= {0.0, 1.0}
    scaler = json.loads((tiny_prepared.root / "standardizer.json").read_text())
    assert all(scaler["std"][i] == 1.0 and scaler["mean"][i] == 0.0 for i in indicator)


def test_load_projects_requested_feature_set(tiny_prepared):
    spec = FeatureSetSpec.parse("Loc+K")
    ws = tiny_prepared.load(tiny_prepared.participants[:2], "test", spec)
    assert ws.X.shape[2] == 28 and ws.columns == spec.columns


def test_missing_prepared_dir_names_the_command(tmp_path):
    with pytest.raises(MissingArtifactError, match="sparsecast prepare"):
        PreparedData(tmp_path)


def test_csv_source_matches_in_memory_source(tmp_path):
    cfg = CohortConfig(n_participants=1, days_per_participant=2, doses_per_day=2, seed=6)
    synthesize(cfg, tmp_path)
    cohort = gen_cohort(cfg)
    from_csv = merge_streams(*csv_source(tmp_path, 0)())
    in_memory = merge_streams(*generated_source(cohort, cohort.profiles[0])())
    np.testing.assert_array_equal(from_csv.ts_utc, in_memory.ts_utc)
    np.testing.assert_array_equal(from_csv.taken_ts, in_memory.taken_ts)
    np.testing.assert_array_equal(from_csv.prescribed_ts, in_memory.prescribed_ts)
    np.testing.assert_allclose(from_csv.values, in_memory.values, atol=5e-7, rtol=0)


def test_csv_source_reports_missing_files(tmp_path):
    with pytest.raises(MissingArtifactError, match="sparsecast synth"):
        csv_source(tmp_path, 3)()
