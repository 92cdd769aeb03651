"""Accuracy and macro-averaged precision/recall/F1, plus the feature-ablation
harness that trains one incremental model per feature set."""

from __future__ import annotations

import csv
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from sparsecast import neural
from sparsecast.features import FeatureSetSpec
from sparsecast.trainer import Schedule, incremental_train

log = logging.getLogger(__name__)

THRESHOLD = 0.5
T_TEST_NOTE = "paired two-sided t-test over per-phase macro-F1 differences (interpretation)"


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def confusion(predictions, labels) -> Confusion:
    pred = np.asarray(predictions).astype(bool)
    true = np.asarray(labels).astype(bool)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    return Confusion(
        tp=int(np.sum(pred & true)),
        fp=int(np.sum(pred & ~true)),
        fn=int(np.sum(~pred & true)),
        tn=int(np.sum(~pred & ~true)),
    )


def confusion_from_probs(probs, labels, threshold=THRESHOLD) -> Confusion:
    return confusion(np.asarray(probs) >= threshold, labels)


def _ratio(num, den):
    return num / den if den else 0.0


def _class_scores(tp, fp, fn):
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return precision, recall, _ratio(2 * precision * recall, precision + recall)


def macro_metrics(c: Confusion) -> Metrics:
    """Per-class precision/recall/F1 for both classes, then unweighted means.

    An undefined ratio (0/0) scores 0 for that class.
    """
    if c.total <= 0:
        raise ValueError("empty confusion matrix")
    pos = _class_scores(c.tp, c.fp, c.fn)
    neg = _class_scores(c.tn, c.fn, c.fp)
    return Metrics(
        accuracy=(c.tp + c.tn) / c.total,
        macro_precision=(pos[0] + neg[0]) / 2,
        macro_recall=(pos[1] + neg[1]) / 2,
        macro_f1=(pos[2] + neg[2]) / 2,
    )


def evaluate_windows(state, windows, threshold=THRESHOLD) -> Metrics:
    probs = neural.predict(state, windows.X)
    return macro_metrics(confusion_from_probs(probs, windows.y, threshold))


def paired_t_test(with_k, without_k):
    """Two-sided paired t-test; returns (statistic, p_value) or NaNs when undefined."""
    a, b = np.asarray(with_k, float), np.asarray(without_k, float)
    if a.size < 2 or np.allclose(a - b, (a - b)[0]):
        return float("nan"), float("nan")
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


# --- ablation ------------------------------------------------------------------------------

REPORT_FIELDS = [
    "ordering", "phase", "train_users", "test_users", "features", "n_features",
    "accuracy", "macro_precision", "macro_recall", "macro_f1",
]


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)
    specs: list = field(default_factory=list)
    orderings: list = field(default_factory=list)

    def table(self, ordering=None):
        return [r for r in self.rows if ordering is None or r["ordering"] == ordering]

    def final_f1(self, spec_name, ordering):
        rows = [r for r in self.rows if r["features"] == spec_name and r["ordering"] == ordering]
        return max(rows, key=lambda r: r["phase"])["macro_f1"]

    def f1_series(self, spec_name, ordering):
        rows = sorted((r for r in self.rows if r["features"] == spec_name and r["ordering"] == ordering),
                      key=lambda r: r["phase"])
        return [r["macro_f1"] for r in rows]

    def knowledge_pairs(self):
        """(without-K, with-K) spec name pairs present in the report."""
        names = set(self.specs)
        pairs = []
        for name in self.specs:
            spec = FeatureSetSpec.parse(name)
            if spec.include_K:
                continue
            partner = FeatureSetSpec(spec.include_H, spec.include_L, True, spec.loc_only).name
            if partner in names:
                pairs.append((name, partner))
        return pairs

    def knowledge_tests(self):
        out = []
        for base, with_k in self.knowledge_pairs():
            a, b = [], []
            for o in self.orderings:
                b += self.f1_series(base, o)
                a += self.f1_series(with_k, o)
            t, p = paired_t_test(a, b)
            deltas = [self.final_f1(with_k, o) - self.final_f1(base, o) for o in self.orderings]
            out.append({"without_k": base, "with_k": with_k, "t": t, "p_value": p,
                        "final_f1_deltas": deltas, "test": T_TEST_NOTE})
        return out

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row[k]) for k in REPORT_FIELDS})
        return path

    def write_long(self, path):
        """One (ordering, phase, features, metric, value) row per number; plot-ready."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["ordering", "phase", "phase_label", "features", "metric", "value"])
            for r in self.rows:
                label = f"{r['train_users']}-{r['test_users']}"
                for metric in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
                    writer.writerow([r["ordering"], r["phase"], label, r["features"], metric, _fmt(r[metric])])
        return path


def _fmt(value):
    return f"{value:.6f}" if isinstance(value, float) else value


def run_ablation(specs, data, schedule: Schedule, hyper, orderings, *, work_dir, train_seed=0, run_log=None):
    """Train one incremental model per (ordering, feature set) and score every phase.

    ``data`` is a :class:`sparsecast.pipeline.PreparedData`; ``orderings`` are
    the seeds of the participant shuffles.
    """
    specs = [FeatureSetSpec.parse(s) if isinstance(s, str) else s for s in specs]
    if not specs:
        raise ValueError("ablation needs at least one feature set")
    work_dir = Path(work_dir)
    report = AblationReport(specs=[s.name for s in specs], orderings=list(orderings))
    for ordering in orderings:
        phases = schedule.phases(data.participants, seed=ordering)
        for spec in specs:
            ckpt_dir = work_dir / f"ordering{ordering}_{spec.name.replace('+', '')}"
            if ckpt_dir.exists():
                shutil.rmtree(ckpt_dir)
            ckpt_dir.mkdir(parents=True)
            chunks = [data.loader(train, "train", spec) for train, _ in phases]
            tests = [data.loader(test, "test", spec) for _, test in phases]
            _, reports = incremental_train(
                chunks, hyper, train_seed,
                checkpoint=ckpt_dir / "model.weights",
                test_chunks=tests,
                evaluate=evaluate_windows,
                phase_info=phases,
                label=spec.name,
                run_log=run_log,
                resume=False,
            )
            for rep in reports:
                m = rep.metrics[spec.name]
                report.rows.append({
                    "ordering": ordering,
                    "phase": rep.phase,
                    "train_users": rep.cumulative_train,
                    "test_users": len(rep.test_participants),
                    "features": spec.name,
                    "n_features": spec.n_features,
                    **asdict(m),
                })
            log.info("ordering %s %s final macro-F1 %.3f", ordering, spec.name, reports[-1].metrics[spec.name].macro_f1)
    return report
