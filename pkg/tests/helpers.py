"""Shared test helpers, imported by conftest and test modules alike."""

import numpy as np

from sparsecast.features import WindowSet

# filled by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES = []


def make_windows(n, window_len=4, n_features=3, pos_frac=0.3, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    n_pos = max(1, int(round(n * pos_frac)))
    y = np.zeros(n, dtype=np.uint8)
    y[rng.choice(n, n_pos, replace=False)] = 1
    X = rng.normal(size=(n, window_len, n_features)).astype(dtype)
    X[y == 1] += 0.7
    return WindowSet(
        X=X,
        y=y,
        participant=np.zeros(n, dtype=np.int64),
        start_ts=np.arange(n, dtype=np.int64) * 100,
        end_ts=np.arange(n, dtype=np.int64) * 100 + 99,
        columns=[f"c{i}" for i in range(n_features)],
    )
