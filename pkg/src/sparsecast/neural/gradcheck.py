"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from sparsecast.neural.cnn import cnn_backward, cnn_forward
from sparsecast.neural.lstm import lstm_backward, lstm_forward
from sparsecast.neural.optim import bce_loss
from sparsecast.neural.state import CnnArch, LstmArch, ModelState, init_state

# below this magnitude a coordinate is compared on absolute error
GRAD_FLOOR = 1e-6


def numerical_grad(loss_fn, params, eps=1e-5):
    grad = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + eps
        up = loss_fn()
        params[i] = old - eps
        down = loss_fn()
        params[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=GRAD_FLOOR):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(model_kind, n_features, seed, *, seq_len=12, batch=2, kernel=4, stride=2, eps=1e-5, backward=None):
    """Max relative error between analytic and finite-difference gradients.

    Uses a small random batch; for the CNN the window height, kernel and
    stride are shrunk to ``seq_len``/``kernel``/``stride``. ``backward`` can
    replace the analytic backward pass (negative controls in tests).
    """
    rng = np.random.default_rng(seed)
    if model_kind == "lstm":
        arch = LstmArch(n_features)
        fwd, bwd = lstm_forward, lstm_backward
    elif model_kind == "cnn":
        arch = CnnArch(n_features, window_len=seq_len, kernel=kernel, stride=stride)
        fwd, bwd = cnn_forward, cnn_backward
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    bwd = backward or bwd
    base = init_state(arch, seed)
    # scale up so gates and relus sit away from their flat regions
    params = base.params + rng.normal(0.0, 0.5, base.params.size)
    state = ModelState(arch, params, seed=seed)
    x = rng.normal(size=(batch, seq_len, n_features))
    y = (np.arange(batch) % 2).astype(float)

    probs, cache = fwd(state, x)
    _, dprobs = bce_loss(probs, y)
    analytic = bwd(state, cache, dprobs)

    def loss():
        return bce_loss(fwd(state, x)[0], y)[0]

    numeric = numerical_grad(loss, state.params, eps)
    return max_relative_error(analytic, numeric)
