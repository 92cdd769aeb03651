"""Incremental chunked training with checkpoints between sessions, plus
personalisation by continued training on a target participant chunk."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from sparsecast import neural
from sparsecast.errors import CompatibilityError, ConfigError, DataError, ResumeError
from sparsecast.features import WindowSet
from sparsecast.neural import Hyper, ModelState, adam_step, bce_loss, init_state, load_state, save_state

log = logging.getLogger(__name__)

DEFAULT_CHUNKS = (1, 4, 4, 4, 4, 5)


@dataclass(frozen=True)
class Schedule:
    train_chunks: tuple = DEFAULT_CHUNKS
    test_chunks: tuple = DEFAULT_CHUNKS
    shuffle_seed: int = 0

    def __post_init__(self):
        if len(self.train_chunks) != len(self.test_chunks) or not self.train_chunks:
            raise ConfigError("train and test chunk lists must be non-empty and equally long", field="chunks")
        if any(c < 1 for c in self.train_chunks) or any(c < 1 for c in self.test_chunks):
            raise ConfigError("chunk sizes must be >= 1", field="chunks")
        if any(t > c for c, t in zip(self.train_chunks, self.test_chunks)):
            raise ConfigError("a phase cannot test more participants than it trains on", field="test_chunks")

    @property
    def n_participants(self):
        return int(sum(self.train_chunks))

    @property
    def cumulative(self):
        return [int(c) for c in np.cumsum(self.train_chunks)]

    def order(self, participant_ids, seed=None):
        ids = list(participant_ids)
        if len(ids) != self.n_participants:
            raise ConfigError(
                f"schedule covers {self.n_participants} participants, cohort has {len(ids)}", field="chunks"
            )
        rng = np.random.default_rng(self.shuffle_seed if seed is None else seed)
        return [ids[i] for i in rng.permutation(len(ids))]

    def phases(self, participant_ids, seed=None):
        """``[(train_ids, test_ids), ...]`` for one shuffled participant order.

        Each phase trains on a fresh chunk and tests on the held-out windows of
        the last ``test_chunks[i]`` participants of that chunk.
        """
        order = self.order(participant_ids, seed)
        out, pos = [], 0
        for n_train, n_test in zip(self.train_chunks, self.test_chunks):
            chunk = order[pos : pos + n_train]
            pos += n_train
            out.append((chunk, chunk[len(chunk) - n_test :]))
        return out


@dataclass
class PhaseReport:
    phase: int
    train_participants: list
    test_participants: list
    cumulative_train: int
    metrics: dict = field(default_factory=dict)  # label -> Metrics
    epoch_losses: list = field(default_factory=list)

    def to_json(self):
        out = asdict(self)
        out["metrics"] = {k: asdict(v) for k, v in self.metrics.items()}
        return out


class ResidentTracker:
    """Instrumentation hook: bytes of window data currently held by the trainer."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.loads = []

    def acquire(self, ws):
        self.current += ws.nbytes
        self.loads.append(ws.nbytes)
        self.peak = max(self.peak, self.current)

    def release(self, ws):
        self.current -= ws.nbytes


def session_seed(seed, phase):
    return int(np.random.SeedSequence([int(seed), int(phase)]).generate_state(1)[0])


def batch_order(n, epoch, seed):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)])).permutation(n)


def run_epoch(state: ModelState, X, y, hyper: Hyper, order):
    losses = []
    for lo in range(0, len(order), hyper.batch_size):
        idx = np.sort(order[lo : lo + hyper.batch_size])
        probs, cache = neural.forward(state, X[idx])
        loss, dprobs = bce_loss(probs, y[idx])
        grads = neural.backward(state, cache, dprobs)
        state = adam_step(state, grads, hyper)
        losses.append(loss)
    return state, float(np.mean(losses)) if losses else float("nan")


def train_session(prior: ModelState | None, chunk: WindowSet, hyper: Hyper, seed, *, epochs=None, on_epoch=None):
    """One Algorithm-1 session: build the model, load ``prior`` weights if
    given, train ``epochs`` passes of shuffled mini-batches over ``chunk``.

    The optimizer is recompiled (moments reset) at every session start.
    """
    if len(chunk) == 0:
        raise DataError("training chunk is empty")
    n_epochs = hyper.n_epochs if epochs is None else epochs
    if prior is None:
        state = init_state(neural.make_arch(hyper, chunk.X.shape[2], chunk.window_len), seed)
    else:
        arch = prior.arch
        if arch.n_features != chunk.X.shape[2] or (arch.kind == "cnn" and arch.window_len != chunk.window_len):
            raise CompatibilityError(
                f"checkpoint expects {arch.n_features} features, chunk has {chunk.X.shape[2]}"
            )
        if n_epochs == 0:
            return prior
        state = prior.reset_optimizer()
    if len(np.unique(chunk.y)) < 2:
        log.warning("training chunk holds a single class")
    y = chunk.y.astype(np.float64)
    for epoch in range(n_epochs):
        state, loss = run_epoch(state, chunk.X, y, hyper, batch_order(len(chunk), epoch, seed))
        log.info("epoch %d/%d loss %.5f", epoch + 1, n_epochs, loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    return state


ChunkSource = Callable[[], WindowSet]


def _materialise(source):
    return source() if callable(source) else source


def incremental_train(
    chunks: Sequence[ChunkSource | WindowSet],
    hyper: Hyper,
    seed,
    *,
    checkpoint: str | Path | None = None,
    test_chunks: Sequence[ChunkSource | WindowSet] | None = None,
    evaluate: Callable | None = None,
    phase_info: Sequence[tuple] | None = None,
    label: str = "model",
    run_log: str | Path | None = None,
    resume: bool = True,
    tracker: ResidentTracker | None = None,
    on_phase_end: Callable | None = None,
    memory_budget: int | None = None,
):
    """Train sequentially over disjoint chunks, checkpointing after every phase.

    Chunks may be loader callables; only one chunk is materialised at a time.
    With ``resume`` and an existing checkpoint, phases up to the recorded one
    are skipped and training continues from the saved weights. ``evaluate``
    is called as ``evaluate(state, test_windows)`` and must return Metrics.
    ``memory_budget`` (bytes) rejects any chunk larger than the budget.
    """
    if not chunks:
        raise DataError("incremental training needs at least one chunk")
    checkpoint = Path(checkpoint) if checkpoint is not None else None
    state, start = None, 0
    if resume and checkpoint is not None and checkpoint.exists():
        state = load_state(checkpoint)
        done = state.meta.get("phase")
        if not isinstance(done, int) or not 1 <= done <= len(chunks):
            raise ResumeError(f"checkpoint {checkpoint} records invalid phase {done!r}", phase=done)
        start = done
        log.info("resuming after phase %d from %s", done, checkpoint)

    reports = []
    cumulative = 0
    for phase in range(len(chunks)):
        info = phase_info[phase] if phase_info else ([phase], [phase])
        cumulative += len(info[0])
        if phase < start:
            continue
        chunk = _materialise(chunks[phase])
        if memory_budget is not None and chunk.nbytes > memory_budget:
            raise DataError(
                f"phase {phase + 1} chunk holds {chunk.nbytes} bytes, over the {memory_budget}-byte budget; "
                "use smaller chunks"
            )
        if tracker is not None:
            tracker.acquire(chunk)
        losses = []
        state = train_session(state, chunk, hyper, session_seed(seed, phase), on_epoch=lambda e, l: losses.append(l))
        if tracker is not None:
            tracker.release(chunk)
        del chunk
        state.meta["phase"] = phase + 1
        if checkpoint is not None:
            save_state(state, checkpoint)
        report = PhaseReport(phase + 1, list(info[0]), list(info[1]), cumulative, epoch_losses=losses)
        if test_chunks is not None and evaluate is not None:
            test = _materialise(test_chunks[phase])
            if tracker is not None:
                tracker.acquire(test)
            report.metrics[label] = evaluate(state, test)
            if tracker is not None:
                tracker.release(test)
            del test
        reports.append(report)
        if run_log is not None:
            with open(run_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"label": label, **report.to_json()}) + "\n")
        log.info("phase %d done (%d cumulative participants)", phase + 1, cumulative)
        if on_phase_end is not None:
            on_phase_end(phase + 1, state)
    return state, reports


def personalize(state: ModelState, target_train: WindowSet, hyper: Hyper, seed=0, *, epochs=None) -> ModelState:
    """Continue training a fully trained model on a target chunk only.

    ``state`` is not modified; the adapted copy is returned.
    """
    if target_train is None or len(target_train) == 0:
        raise DataError("personalisation needs a non-empty target chunk")
    return train_session(state.copy(), target_train, hyper, seed, epochs=epochs)
