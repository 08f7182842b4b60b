"""Adam optimizer with bias correction and a step-decay learning-rate schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            step=0,
        )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    A non-finite gradient skips the update (and moment update) for that
    parameter only; the step counter still advances and the incident is
    logged, since early binarized training is noisy but recoverable.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not match "
                             f"parameter {name} of shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            logger.warning("adam_step: non-finite gradient for %r at step %d; update skipped",
                           name, t)
            continue
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return state


def lr_at_epoch(base_lr: float, epoch: int, decay_epochs=(6, 10),
                factor: float = 0.1) -> float:
    """Step decay: multiply by `factor` at each boundary the epoch has reached.

    Epochs are 0-based; the defaults decay a 12-epoch run twice, entering
    epochs 6 and 10.
    """
    lr = base_lr
    for boundary in decay_epochs:
        if epoch >= boundary:
            lr *= factor
    return lr
