"""Conv stack with a dense skip path, forward and backward.

Input windows (B, L, F) are treated as single-channel (L, F) images. The
first conv slides a (kernel, 1) filter down the time axis of every feature
column independently; the remaining convs are 1x1 channel mixers. Flatten
order is (row, feature, channel).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsecast.errors import ShapeError, UsageError
from sparsecast.neural.lstm import sigmoid
from sparsecast.neural.state import ModelState, unflatten


@dataclass
class CnnCache:
    params_id: int
    step: int
    x: np.ndarray
    patches: np.ndarray
    acts: list  # post-relu activations of every conv layer, (B, H1, F, C)
    dense_pre: np.ndarray
    probs: np.ndarray


def _patch_index(arch):
    return np.arange(arch.conv_rows)[:, None] * arch.stride + np.arange(arch.kernel)


def cnn_forward(state: ModelState, x):
    arch = state.arch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (arch.window_len, arch.n_features):
        raise ShapeError(f"expected (batch, {arch.window_len}, {arch.n_features}) input, got {x.shape}")
    p = unflatten(arch, state.params)
    B = x.shape[0]

    patches = x[:, _patch_index(arch), :]  # (B, H1, k, F)
    a = np.einsum("bhkf,kc->bhfc", patches, p["conv1_w"]) + p["conv1_b"]
    a = np.maximum(a, 0.0)
    acts = [a]
    for j in range(arch.n_pointwise):
        a = np.maximum(a @ p[f"pw{j}_w"] + p[f"pw{j}_b"], 0.0)
        acts.append(a)
    dense_pre = a.reshape(B, -1) @ p["dense_w"][:, 0] + p["dense_b"][0]
    skip = x.reshape(B, -1) @ p["skip_w"][:, 0] + p["skip_b"][0]
    probs = sigmoid(np.maximum(dense_pre, 0.0) + skip)
    return probs, CnnCache(id(state.params), state.step, x, patches, acts, dense_pre, probs)


def cnn_backward(state: ModelState, cache: CnnCache, dprobs):
    if cache.params_id != id(state.params) or cache.step != state.step:
        raise UsageError("stale CNN cache: parameters changed since the forward pass")
    arch = state.arch
    p = unflatten(arch, state.params)
    grad = np.zeros_like(state.params)
    g_ = unflatten(arch, grad)
    B = cache.x.shape[0]

    dz = np.asarray(dprobs, dtype=np.float64) * cache.probs * (1.0 - cache.probs)
    g_["skip_w"][:, 0] = cache.x.reshape(B, -1).T @ dz
    g_["skip_b"][0] = dz.sum()
    dd = dz * (cache.dense_pre > 0)
    last = cache.acts[-1]
    g_["dense_w"][:, 0] = last.reshape(B, -1).T @ dd
    g_["dense_b"][0] = dd.sum()
    da = (np.outer(dd, p["dense_w"][:, 0])).reshape(last.shape)
    for j in range(arch.n_pointwise - 1, -1, -1):
        out, inp = cache.acts[j + 1], cache.acts[j]
        dpre = da * (out > 0)
        g_[f"pw{j}_w"][...] = np.einsum("bhfi,bhfo->io", inp, dpre)
        g_[f"pw{j}_b"][...] = dpre.sum(axis=(0, 1, 2))
        da = dpre @ p[f"pw{j}_w"].T
    dpre = da * (cache.acts[0] > 0)
    g_["conv1_w"][...] = np.einsum("bhkf,bhfc->kc", cache.patches, dpre)
    g_["conv1_b"][...] = dpre.sum(axis=(0, 1, 2))
    return grad
