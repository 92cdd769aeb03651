"""Single-layer LSTM with a sigmoid dense head, forward and BPTT backward.

Gate order inside the fused kernel is (input, forget, candidate, output).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsecast.errors import ShapeError, UsageError
from sparsecast.neural.state import ModelState, unflatten


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class LstmCache:
    params_id: int
    step: int
    x: np.ndarray
    h: np.ndarray  # (T+1, B, h) with h[0] = 0
    c: np.ndarray
    gates: np.ndarray  # (T, B, 4h) post-activation
    probs: np.ndarray


def _check_input(state, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != state.arch.n_features:
        raise ShapeError(f"expected (batch, steps, {state.arch.n_features}) input, got {x.shape}")
    return x


def lstm_forward(state: ModelState, x):
    """Return ``(probs, cache)`` for a batch ``x`` of shape (B, T, F)."""
    x = _check_input(state, x)
    p = unflatten(state.arch, state.params)
    B, T, _ = x.shape
    H = state.arch.hidden
    W, U, b = p["kernel"], p["recurrent"], p["bias"]

    # input projections for every step at once; time-major for the recurrence
    zx = np.einsum("btf,fg->tbg", x, W) + b
    h = np.zeros((T + 1, B, H))
    c = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    for t in range(T):
        z = zx[t] + h[t] @ U
        g = gates[t]
        g[:, : 2 * H] = sigmoid(z[:, : 2 * H])
        g[:, 2 * H : 3 * H] = np.tanh(z[:, 2 * H : 3 * H])
        g[:, 3 * H :] = sigmoid(z[:, 3 * H :])
        c[t + 1] = g[:, H : 2 * H] * c[t] + g[:, :H] * g[:, 2 * H : 3 * H]
        h[t + 1] = g[:, 3 * H :] * np.tanh(c[t + 1])
    logit = h[T] @ p["dense_w"][:, 0] + p["dense_b"][0]
    probs = sigmoid(logit)
    return probs, LstmCache(id(state.params), state.step, x, h, c, gates, probs)


def lstm_backward(state: ModelState, cache: LstmCache, dprobs):
    """Gradient of the loss w.r.t. the flat parameter vector.

    ``dprobs`` is dLoss/dprob per batch element.
    """
    if cache.params_id != id(state.params) or cache.step != state.step:
        raise UsageError("stale LSTM cache: parameters changed since the forward pass")
    dprobs = np.asarray(dprobs, dtype=np.float64)
    p = unflatten(state.arch, state.params)
    grad = np.zeros_like(state.params)
    g_ = unflatten(state.arch, grad)
    x, h, c, gates = cache.x, cache.h, cache.c, cache.gates
    T, B, H = gates.shape[0], gates.shape[1], state.arch.hidden
    U = p["recurrent"]

    dlogit = dprobs * cache.probs * (1.0 - cache.probs)
    g_["dense_w"][:, 0] = h[T].T @ dlogit
    g_["dense_b"][0] = dlogit.sum()
    dh = np.outer(dlogit, p["dense_w"][:, 0])
    dc = np.zeros((B, H))
    dz = np.empty((T, B, 4 * H))
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, cand, o = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        tc = np.tanh(c[t + 1])
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[:, :H] = dc * cand * i * (1.0 - i)
        d[:, H : 2 * H] = dc * c[t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - cand * cand)
        d[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc = dc * f
        dh = d @ U.T
    g_["kernel"][...] = np.einsum("btf,tbg->fg", x, dz)
    g_["recurrent"][...] = np.einsum("tbh,tbg->hg", h[:T], dz)
    g_["bias"][...] = dz.sum(axis=(0, 1))
    return grad
