"""Feature extractors: dense networks, stochastic 0-1 input gates and the
classification residual transform."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Mlp:
    """Fully connected ReLU network; the last layer stays linear.

    Default synthetic-benchmark geometry is input -> 256 -> 256 -> output.
    An input width of 0 is allowed and reduces the network to its bias path
    (used for regression on an empty parent set).
    """

    def __init__(self, widths: list[int], rng: np.random.Generator, name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("Mlp needs at least an input and an output width")
        self.widths = list(widths)
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(2.0 / max(1, fan_in))
            w = rng.standard_normal((fan_in, fan_out)) * scale
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}/w{i}"))
            self.biases.append(
                Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}/b{i}")
            )

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = h.relu()
        return h

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class GateVector:
    """Learnable stochastic 0-1 mask over d input coordinates.

    Training samples hard Bernoulli gates once per batch and passes the
    gradient straight through to the selection probabilities; evaluation
    thresholds the probabilities at 0.5.
    """

    def __init__(self, d: int, init_logit: float = 3.0, name: str = "gates"):
        self.d = d
        self.logits = Tensor(
            np.full(d, float(init_logit)), requires_grad=True, name=f"{name}/logits"
        )

    def probs(self) -> Tensor:
        return 1.0 / ((-self.logits).exp() + 1.0)

    def eval_mask(self) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.logits.data))
        return (p > 0.5).astype(np.float64)

    def selected(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.eval_mask())]

    def params(self) -> list[Tensor]:
        return [self.logits]


def gate_apply(
    x: Tensor,
    gates: GateVector,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mask the columns of `x` with sampled (train) or thresholded (eval) gates."""
    if x.shape[-1] != gates.d:
        raise ValueError(f"gate_apply: {gates.d} gates vs input shape {x.shape}")
    if mode == "eval":
        return x * Tensor(gates.eval_mask())
    if mode != "train":
        raise ValueError(f"gate_apply: unknown mode {mode!r}")
    if rng is None:
        raise ValueError("gate_apply: train mode needs an rng")
    p = gates.probs()
    hard = (rng.random(gates.d) < p.data).astype(np.float64)
    # straight-through: value is the hard sample, gradient is dp/dlogit
    st = p + Tensor(hard - p.data)
    return x * st


def classification_residual(labels_onehot, logits: Tensor) -> Tensor:
    """Elementwise product of the one-hot label with softmax(logits).

    The single nonzero entry per row is the predicted probability of the
    true class; this matrix feeds the invariance losses.
    """
    onehot = labels_onehot if isinstance(labels_onehot, Tensor) else Tensor(labels_onehot)
    if onehot.shape != logits.shape:
        raise ValueError(
            f"classification_residual: shapes differ, {onehot.shape} vs {logits.shape}"
        )
    return onehot * logits.softmax(axis=1)


def onehot_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
