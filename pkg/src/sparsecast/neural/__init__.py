"""From-scratch numpy kernels for the LSTM and CNN forecasters."""

import numpy as np

from sparsecast.neural.cnn import cnn_backward, cnn_forward
from sparsecast.neural.gradcheck import grad_check, numerical_grad
from sparsecast.neural.lstm import lstm_backward, lstm_forward, sigmoid
from sparsecast.neural.optim import Hyper, adam_step, bce_loss
from sparsecast.neural.state import (
    CnnArch,
    LstmArch,
    ModelState,
    init_state,
    load_state,
    param_count,
    save_state,
    unflatten,
)


def make_arch(hyper, n_features, window_len):
    if hyper.model == "lstm":
        return LstmArch(n_features, hyper.hidden)
    return CnnArch(n_features, window_len=window_len, kernel=hyper.cnn_kernel, stride=hyper.cnn_stride)


def forward(state, x):
    if state.arch.kind == "lstm":
        return lstm_forward(state, x)
    return cnn_forward(state, x)


def backward(state, cache, dprobs):
    if state.arch.kind == "lstm":
        return lstm_backward(state, cache, dprobs)
    return cnn_backward(state, cache, dprobs)


def predict(state, x, batch_size=256):
    """Probabilities for a stack of windows, evaluated in slices."""
    out = [forward(state, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


__all__ = [
    "CnnArch",
    "Hyper",
    "LstmArch",
    "ModelState",
    "adam_step",
    "backward",
    "bce_loss",
    "cnn_backward",
    "cnn_forward",
    "forward",
    "grad_check",
    "init_state",
    "load_state",
    "lstm_backward",
    "lstm_forward",
    "make_arch",
    "numerical_grad",
    "param_count",
    "predict",
    "save_state",
    "sigmoid",
    "unflatten",
]
