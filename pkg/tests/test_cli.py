import csv
import hashlib
import json

import filelock
import pytest

from sparsecast.cli import main

CONFIG = """[run]
seed = 3

[cohort]
n_participants = 3
days_per_participant = 7
doses_per_day = mixed

[prepare]
window_len = 40
sample_stride = 30

[features]
specs = H, H+K
train = H+K

[schedule]
train_chunks = 1, 1, 1
test_chunks = 1, 1, 1
personalize_epochs = 1

[hyper]
epochs = 2

[adasyn]
k = 3
"""


def _write_config(root, extra=""):
    root.mkdir(parents=True, exist_ok=True)
    path = root / "run.ini"
    path.write_text(CONFIG + extra)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_config(root)
    codes = {cmd: main([cmd, "--config", str(cfg)]) for cmd in
             ("synth", "prepare", "train", "evaluate", "ablate", "personalize")}
    return root, cfg, codes


def test_full_pipeline_exits_cleanly_and_writes_reports(pipeline):
    root, _, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)
    reports = root / "reports"
    for name in ("train.csv", "train_loss.png", "evaluate.csv", "ablation.csv", "ablation_long.csv",
                 "ablation_f1.png", "knowledge_tests.json", "personalize.csv"):
        assert (reports / name).stat().st_size > 0, name
    assert (root / "checkpoints" / "model.weights").exists()
    assert sorted(p.name for p in (root / "checkpoints").glob("phase_*.weights")) == [
        "phase_1.weights", "phase_2.weights", "phase_3.weights"]
    assert (reports / "train_loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ablation_report_has_two_spec_columns_per_phase(pipeline):
    root, _, _ = pipeline
    rows = list(csv.DictReader(open(root / "reports" / "ablation.csv")))
    for phase in ("1", "2", "3"):
        assert sorted(r["features"] for r in rows if r["phase"] == phase) == ["H", "H+K"]


def test_manifests_hash_their_artifacts(pipeline):
    root, _, _ = pipeline
    for cmd in ("synth", "prepare", "train", "evaluate", "ablate", "personalize"):
        manifest = json.loads((root / "reports" / f"manifest_{cmd}.json").read_text())
        assert manifest["seed"] == 3 and manifest["config"]["seed"] == 3
        assert manifest["config_text"].startswith("[run]")
        assert manifest["artifacts"]
    # prepared containers are not rewritten by later commands, so their hashes must still hold
    prepared = json.loads((root / "reports" / "manifest_prepare.json").read_text())["artifacts"]
    assert any(p.endswith("p000_train.scw") for p in prepared)
    for path, digest in prepared.items():
        assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest


def test_train_is_deterministic_across_directories(pipeline, tmp_path):
    root, _, _ = pipeline
    other = _write_config(tmp_path, f"\n[paths]\nprepared_dir = {root / 'prepared'}\n")
    assert main(["train", "--config", str(other)]) == 0
    for name in ("model.weights", "phase_1.weights", "phase_3.weights"):
        assert (tmp_path / "checkpoints" / name).read_bytes() == (root / "checkpoints" / name).read_bytes()


def test_restart_reproduces_checkpoint_bytes(pipeline, tmp_path):
    root, _, _ = pipeline
    cfg = _write_config(tmp_path, f"\n[paths]\nprepared_dir = {root / 'prepared'}\n")
    assert main(["train", "--config", str(cfg)]) == 0
    first = (tmp_path / "checkpoints" / "model.weights").read_bytes()
    assert main(["train", "--config", str(cfg)]) == 0  # already complete: resumes past every phase
    assert (tmp_path / "checkpoints" / "model.weights").read_bytes() == first
    assert main(["train", "--config", str(cfg), "--restart"]) == 0
    assert (tmp_path / "checkpoints" / "model.weights").read_bytes() == first


def test_personalize_named_participants(pipeline, tmp_path):
    root, cfg, _ = pipeline
    assert main(["personalize", "--config", str(cfg), "--participants", "0,2"]) == 0
    rows = list(csv.DictReader(open(root / "reports" / "personalize.csv")))
    assert {r["participant"] for r in rows} == {"0", "2"}
    assert {r["stage"] for r in rows} == {"phase_1", "phase_2", "phase_3", "final", "personalized"}
    assert (root / "checkpoints" / "personalized" / "p002.weights").exists()


def test_unknown_participant_is_a_data_error(pipeline, capsys):
    _, cfg, _ = pipeline
    assert main(["evaluate", "--config", str(cfg), "--participants", "7"]) == 3
    assert "unknown participants" in capsys.readouterr().err


def test_missing_upstream_artifact_names_the_command(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 3
    assert "run `sparsecast prepare` first" in capsys.readouterr().err
    assert main(["prepare", "--config", str(cfg)]) == 3
    assert "run `sparsecast synth` first" in capsys.readouterr().err


def test_config_error_exit_code_and_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[run]\nseed = 1\n[hyper]\nepochs = lots\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "line 4" in capsys.readouterr().err


def test_locked_checkpoint_dir_is_refused(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    cfg = _write_config(tmp_path, f"\n[paths]\nprepared_dir = {root / 'prepared'}\n")
    (tmp_path / "checkpoints").mkdir()
    with filelock.FileLock(str(tmp_path / "checkpoints" / ".lock")):
        assert main(["train", "--config", str(cfg)]) == 4
    assert "locked" in capsys.readouterr().err


def test_seed_override_changes_the_run(pipeline, tmp_path):
    root, _, _ = pipeline
    cfg = _write_config(tmp_path, f"\n[paths]\nprepared_dir = {root / 'prepared'}\n")
    assert main(["train", "--config", str(cfg), "--seed", "4"]) == 0
    manifest = json.loads((tmp_path / "reports" / "manifest_train.json").read_text())
    assert manifest["seed"] == 4
    assert (tmp_path / "checkpoints" / "model.weights").read_bytes() != (root / "checkpoints" / "model.weights").read_bytes()


def test_synth_out_flag(tmp_path):
    cfg = _write_config(tmp_path, "")
    cfg.write_text(CONFIG.replace("n_participants = 3", "n_participants = 1").replace("days_per_participant = 7", "days_per_participant = 2"))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "p000_sensor.csv").exists()
    assert not (tmp_path / "data").exists()
