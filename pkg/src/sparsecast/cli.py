"""``sparsecast`` command line: synth, prepare, train, evaluate, ablate, personalize.

Each command reads one config file, writes only into the configured output
directories and leaves a manifest (config snapshot, seeds, artifact hashes)
in the report directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import re
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import filelock
import numpy as np

from sparsecast import __version__, plotting
from sparsecast.cohort import synthesize
from sparsecast.config import RunConfig, load_config
from sparsecast.errors import ConfigError, DataError, MissingArtifactError, SparsecastError, TrainingError
from sparsecast.evaluate import evaluate_windows, run_ablation
from sparsecast.neural import load_state, save_state
from sparsecast.pipeline import PreparedData, csv_source, prepare
from sparsecast.trainer import PhaseReport, incremental_train, personalize

log = logging.getLogger("sparsecast")

COMMANDS = ("synth", "prepare", "train", "evaluate", "ablate", "personalize")
MODEL_FILE = "model.weights"
RUN_LOG = "run_log.jsonl"
METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
_SENSOR_FILE = re.compile(r"^p(\d{3})_sensor\.csv$")


class LockError(TrainingError):
    pass


# --- helpers ---------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, command, artifacts, extra=None):
    """Config snapshot, seeds and sha256 of every artifact the command wrote."""
    report_dir = cfg.paths.report_dir
    report_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "sparsecast_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "config_text": cfg.text,
        "artifacts": {str(p): _sha256(p) for p in sorted(set(map(Path, artifacts))) if p.is_file()},
    }
    if extra:
        manifest.update(extra)
    path = report_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    return path


@contextmanager
def checkpoint_lock(directory):
    """Refuse to run when another process holds the checkpoint directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(directory / ".lock"))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise LockError(f"{directory} is locked by another sparsecast process") from None
    try:
        yield
    finally:
        lock.release()


def _participants(arg, available):
    if arg is None:
        return list(available)
    try:
        wanted = [int(x) for x in arg.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--participants expects comma-separated integers, got {arg!r}") from None
    missing = sorted(set(wanted) - set(available))
    if missing:
        raise DataError(f"unknown participants {missing}; available: {list(available)}")
    return wanted


def _prepared(cfg):
    return PreparedData(cfg.paths.prepared_dir)


def _write_rows(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in row.items()})
    return path


def _read_run_log(path):
    """Last record per phase from a JSONL run log."""
    latest = {}
    if Path(path).exists():
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                latest[rec["phase"]] = rec
    return [latest[k] for k in sorted(latest)]


# --- commands ------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args):
    out = Path(args.out) if getattr(args, "out", None) else cfg.paths.data_dir
    out.mkdir(parents=True, exist_ok=True)
    cohort = synthesize(cfg.cohort, out)
    profiles = [
        {"participant_id": p.participant_id, "prescribed_hours": list(p.prescribed_hours),
         "late_activity_propensity": p.late_activity_propensity}
        for p in cohort.profiles
    ]
    (out / "cohort.json").write_text(json.dumps({"config": asdict(cfg.cohort), "profiles": profiles}, indent=2),
                                     encoding="utf-8")
    artifacts = sorted(out.glob("p*_*.csv")) + [out / "cohort.json"]
    write_manifest(replace(cfg, paths=replace(cfg.paths, data_dir=out)), "synth", artifacts)
    log.info("synthesised %d participants into %s", len(profiles), out)
    return 0


def cmd_prepare(cfg: RunConfig, args):
    data_dir = cfg.paths.data_dir
    found = sorted(int(m.group(1)) for p in data_dir.glob("p*_sensor.csv") if (m := _SENSOR_FILE.match(p.name)))
    if not found:
        raise MissingArtifactError(data_dir / "p000_sensor.csv", "synth")
    pids = _participants(args.participants, found)
    out = cfg.paths.prepared_dir
    if out.exists():
        shutil.rmtree(out)
    data = prepare({pid: csv_source(data_dir, pid) for pid in pids}, out, cfg.prepare, cfg.adasyn)
    write_manifest(cfg, "prepare", sorted(out.iterdir()))
    log.info("prepared %d participants into %s", len(data.participants), out)
    return 0


def _train_phases(cfg, data, ordering):
    return cfg.schedule.phases(data.participants, seed=ordering)


def cmd_train(cfg: RunConfig, args):
    data = _prepared(cfg)
    spec = cfg.train_spec
    ckpt_dir = cfg.paths.checkpoint_dir
    with checkpoint_lock(ckpt_dir):
        checkpoint = ckpt_dir / MODEL_FILE
        run_log = ckpt_dir / RUN_LOG
        if args.restart:
            for p in [checkpoint, run_log, *ckpt_dir.glob("phase_*.weights")]:
                p.unlink(missing_ok=True)
        if checkpoint.exists():
            meta = load_state(checkpoint).meta
            if meta.get("features", spec.name) != spec.name or meta.get("seed", cfg.seed) != cfg.seed:
                raise TrainingError(
                    f"{checkpoint} was trained with features={meta.get('features')} seed={meta.get('seed')}; "
                    "rerun with --restart to discard it"
                )
        phases = _train_phases(cfg, data, cfg.seed)

        def snapshot(phase, state):
            state.meta.update(features=spec.name, seed=cfg.seed)
            save_state(state, checkpoint)
            save_state(state, ckpt_dir / f"phase_{phase}.weights")

        incremental_train(
            [data.loader(train, "train", spec) for train, _ in phases],
            cfg.hyper,
            cfg.seed,
            checkpoint=checkpoint,
            test_chunks=[data.loader(test, "test", spec) for _, test in phases],
            evaluate=evaluate_windows,
            phase_info=phases,
            label=spec.name,
            run_log=run_log,
            resume=True,
            on_phase_end=snapshot,
        )
    records = _read_run_log(run_log)
    rows = [
        {"phase": r["phase"], "train_users": r["cumulative_train"], "test_users": len(r["test_participants"]),
         "features": spec.name, **r["metrics"][spec.name], "final_loss": r["epoch_losses"][-1]}
        for r in records
    ]
    report_dir = cfg.paths.report_dir
    table = _write_rows(report_dir / "train.csv",
                        ["phase", "train_users", "test_users", "features", *METRICS, "final_loss"], rows)
    reports = [PhaseReport(r["phase"], r["train_participants"], r["test_participants"], r["cumulative_train"],
                           epoch_losses=r["epoch_losses"]) for r in records]
    fig = plotting.loss_curves(reports, report_dir / "train_loss.png")
    artifacts = [table, fig, checkpoint, run_log, *sorted(ckpt_dir.glob("phase_*.weights"))]
    write_manifest(cfg, "train", artifacts, {"phases": [[list(a), list(b)] for a, b in phases]})
    return 0


def _load_model(cfg):
    checkpoint = cfg.paths.checkpoint_dir / MODEL_FILE
    if not checkpoint.exists():
        raise MissingArtifactError(checkpoint, "train")
    return load_state(checkpoint)


def cmd_evaluate(cfg: RunConfig, args):
    data = _prepared(cfg)
    state = _load_model(cfg)
    spec = cfg.train_spec
    pids = _participants(args.participants, data.participants)
    rows = []
    for pid in pids:
        m = evaluate_windows(state, data.load([pid], "test", spec))
        rows.append({"participant": pid, "features": spec.name, **asdict(m)})
    pooled = evaluate_windows(state, data.load(pids, "test", spec))
    rows.append({"participant": "all", "features": spec.name, **asdict(pooled)})
    table = _write_rows(cfg.paths.report_dir / "evaluate.csv", ["participant", "features", *METRICS], rows)
    write_manifest(cfg, "evaluate", [table, cfg.paths.checkpoint_dir / MODEL_FILE])
    log.info("pooled macro-F1 %.3f over %d participants", pooled.macro_f1, len(pids))
    return 0


def cmd_ablate(cfg: RunConfig, args):
    data = _prepared(cfg)
    work = cfg.paths.checkpoint_dir / "ablation"
    report_dir = cfg.paths.report_dir
    with checkpoint_lock(cfg.paths.checkpoint_dir):
        run_log = work / RUN_LOG
        if run_log.exists():
            run_log.unlink()
        work.mkdir(parents=True, exist_ok=True)
        report = run_ablation(cfg.specs, data, cfg.schedule, cfg.hyper, cfg.orderings,
                              work_dir=work, train_seed=cfg.seed, run_log=run_log)
    table = report.write_csv(report_dir / "ablation.csv")
    long = report.write_long(report_dir / "ablation_long.csv")
    tests = report.knowledge_tests()
    tests_path = report_dir / "knowledge_tests.json"
    tests_path.write_text(json.dumps(tests, indent=2), encoding="utf-8")
    figs = [plotting.phase_curves(report, report_dir / "ablation_f1.png", "macro_f1"),
            plotting.phase_curves(report, report_dir / "ablation_accuracy.png", "accuracy")]
    write_manifest(cfg, "ablate", [table, long, tests_path, *figs, run_log])
    return 0


def cmd_personalize(cfg: RunConfig, args):
    data = _prepared(cfg)
    final = _load_model(cfg)
    spec = cfg.train_spec
    ckpt_dir = cfg.paths.checkpoint_dir
    if args.participants is None:
        targets = _train_phases(cfg, data, cfg.seed)[-1][1]
    else:
        targets = _participants(args.participants, data.participants)
    snapshots = sorted(ckpt_dir.glob("phase_*.weights"), key=lambda p: int(p.stem.split("_")[1]))
    rows, artifacts = [], []
    with checkpoint_lock(ckpt_dir):
        out_dir = ckpt_dir / "personalized"
        for pid in targets:
            test = data.load([pid], "test", spec)
            for snap in snapshots:
                m = evaluate_windows(load_state(snap), test)
                rows.append({"participant": pid, "stage": snap.stem, **asdict(m)})
            before = evaluate_windows(final, test)
            adapted = personalize(final, data.load([pid], "train", spec), cfg.hyper,
                                  seed=cfg.seed, epochs=cfg.personalize_epochs)
            adapted.meta.update(personalized_for=pid)
            path = save_state(adapted, out_dir / f"p{pid:03d}.weights")
            after = evaluate_windows(adapted, test)
            rows.append({"participant": pid, "stage": "final", **asdict(before)})
            rows.append({"participant": pid, "stage": "personalized", **asdict(after)})
            fig = plotting.personalization_bars({"final": before, "personalized": after},
                                                cfg.paths.report_dir / f"personalize_p{pid:03d}.png")
            artifacts += [path, fig]
            log.info("participant %d macro-F1 %.3f -> %.3f", pid, before.macro_f1, after.macro_f1)
    table = _write_rows(cfg.paths.report_dir / "personalize.csv", ["participant", "stage", *METRICS], rows)
    write_manifest(cfg, "personalize", [table, *artifacts], {"targets": list(targets)})
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "personalize": cmd_personalize,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--participants", help="comma-separated participant ids")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--out", help="output directory (default: [paths] data_dir)")
        if name == "train":
            p.add_argument("--restart", action="store_true", help="discard existing checkpoints first")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return HANDLERS[args.command](cfg, args)
    except SparsecastError as exc:
        print(f"sparsecast {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
