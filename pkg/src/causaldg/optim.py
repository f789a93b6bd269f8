"""Adam optimizer and the two step-decay learning-rate schedules."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamState:
    """Per-parameter Adam accumulators.

    The L2 regularizer enters as an additive `weight_decay * param` term on
    the gradient (classic Adam-with-L2, not decoupled weight decay).
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState) -> None:
    """One Adam update over all parameters with populated gradients.

    Gradients are left untouched so callers can inspect them after the step;
    a NaN or Inf gradient aborts the run naming the offending parameter.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(state.params):
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            name = p.name or f"param[{i}]"
            raise FloatingPointError(
                f"adam_step: non-finite gradient in {name} at step {t}"
            )
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_schedule(epoch: int, base_lr: float, kind: str = "synthetic") -> float:
    """Step decay: halve every 400 epochs (synthetic runs) or multiply by
    0.33 every 100 epochs (classification runs)."""
    if epoch < 0:
        raise ValueError(f"lr_schedule: negative epoch {epoch}")
    if kind == "synthetic":
        return base_lr * 0.5 ** (epoch // 400)
    if kind == "classification":
        return base_lr * 0.33 ** (epoch // 100)
    raise ValueError(f"lr_schedule: unknown schedule kind {kind!r}")
