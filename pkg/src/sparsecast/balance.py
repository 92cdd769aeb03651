"""ADASYN minority oversampling over flattened windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsecast.errors import BalanceError, ConfigError
from sparsecast.features import WindowSet


@dataclass(frozen=True)
class AdasynConfig:
    k: int = 5
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("adasyn k must be >= 1", field="k")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("adasyn beta must lie in (0, 1]", field="beta")


def knn(query, points, k):
    """Indices of the ``k`` nearest points (Euclidean), ties to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError(f"k={k} exceeds the {len(points)} available points")
    diff = points - np.asarray(query, dtype=np.float64)
    dist = np.einsum("ij,ij->i", diff, diff)
    return np.argsort(dist, kind="stable")[:k]


def _knn_excluding(X, i, candidates, k):
    """k nearest of ``candidates`` (indices into X) to X[i], never returning i."""
    pool = candidates[candidates != i]
    return pool[knn(X[i], X[pool], k)]


def allocate(ratios, total):
    """Split ``total`` synthetic samples in proportion to ``ratios`` (largest remainder).

    All-zero ratios fall back to a uniform split.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.sum() <= 0:
        ratios = np.ones_like(ratios)
    share = ratios / ratios.sum() * total
    counts = np.floor(share).astype(np.int64)
    short = int(total - counts.sum())
    if short:
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


@dataclass
class AdasynResult:
    windows: WindowSet  # originals followed by synthetic windows
    source: np.ndarray  # per synthetic window: index of the minority seed x_i
    neighbour: np.ndarray  # index of the minority neighbour x_z
    lam: np.ndarray
    ratios: np.ndarray  # r_i per minority window
    minority_label: int


def adasyn(windows: WindowSet, cfg: AdasynConfig = AdasynConfig()) -> AdasynResult:
    """Oversample the minority class of ``windows`` to the ``beta`` balance target.

    Originals are returned untouched, synthetic windows appended after them.
    Synthetic sample j of seed i draws from its own RNG stream (seed, i), so
    the output does not depend on evaluation order.
    """
    y = np.asarray(windows.y).astype(np.int64)
    labels, counts = np.unique(y, return_counts=True)
    if labels.size < 2:
        raise BalanceError("ADASYN needs both classes; got a single-class set")
    minority_label = int(labels[np.argmin(counts)]) if counts[0] != counts[1] else int(labels[1])
    minority = np.flatnonzero(y == minority_label)
    m_min, m_maj = minority.size, y.size - minority.size
    if m_min < cfg.k + 1:
        raise BalanceError(
            f"minority class has {m_min} windows, ADASYN with k={cfg.k} needs >= {cfg.k + 1}; "
            f"use k <= {max(m_min - 1, 0)}"
        )
    total = int(round((m_maj - m_min) * cfg.beta))

    X = windows.X.reshape(len(windows), -1).astype(np.float64)
    everyone = np.arange(len(y))
    ratios = np.empty(m_min)
    neighbours = []
    for row, i in enumerate(minority):
        near = _knn_excluding(X, i, everyone, cfg.k)
        ratios[row] = np.count_nonzero(y[near] != minority_label) / cfg.k
        neighbours.append(_knn_excluding(X, i, minority, cfg.k))
    g = allocate(ratios, total)

    src, nbr, lam = [], [], []
    for row, i in enumerate(minority):
        if g[row] == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(i)]))
        src.append(np.full(g[row], i))
        nbr.append(neighbours[row][rng.integers(0, cfg.k, g[row])])
        lam.append(rng.random(g[row]))
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    nbr = np.concatenate(nbr) if nbr else np.zeros(0, np.int64)
    lam = np.concatenate(lam) if lam else np.zeros(0)

    base = X[src]
    synth = base + lam[:, None] * (X[nbr] - base)
    dtype = windows.X.dtype
    fresh = WindowSet(
        X=synth.reshape((-1,) + windows.X.shape[1:]).astype(dtype),
        y=np.full(src.size, minority_label, dtype=windows.y.dtype),
        participant=windows.participant[src],
        start_ts=windows.start_ts[src],
        end_ts=windows.end_ts[src],
        columns=list(windows.columns),
        synthetic=np.ones(src.size, dtype=bool),
    )
    return AdasynResult(WindowSet.concat([windows, fresh]), src, nbr, lam, ratios, minority_label)
