"""Binary cross-entropy and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsecast.errors import ConfigError
from sparsecast.neural.state import ModelState

PROB_CLAMP = 1e-7
DEFAULT_EPOCHS = {"lstm": 10, "cnn": 38}


@dataclass(frozen=True)
class Hyper:
    model: str = "lstm"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    hidden: int = 2
    cnn_kernel: int = 60
    cnn_stride: int = 30

    def __post_init__(self):
        if self.model not in DEFAULT_EPOCHS:
            raise ConfigError(f"model must be lstm or cnn, got {self.model!r}", field="model")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0", field="epochs")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", field="learning_rate")

    @property
    def n_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.model] if self.epochs is None else self.epochs


def bce_loss(probs, labels):
    """Mean binary cross-entropy; returns ``(loss, dloss/dprobs)``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is zero for
    clamped entries.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = probs.size
    q = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = -(labels * np.log(q) + (1.0 - labels) * np.log(1.0 - q))
    grad = (-labels / q + (1.0 - labels) / (1.0 - q)) / n
    grad[(probs < PROB_CLAMP) | (probs > 1.0 - PROB_CLAMP)] = 0.0
    return float(losses.mean()), grad


def adam_step(state: ModelState, grads, hyper: Hyper) -> ModelState:
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    params = state.params - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return ModelState(state.arch, params, m, v, seed=state.seed, step=t, meta=dict(state.meta))
