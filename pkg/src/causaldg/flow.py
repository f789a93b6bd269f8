"""One-dimensional conditional normalizing flow with a bounded-perturbation
monotone transformer.

Each layer computes

    z = a * (y + (1/N) * sum_i w_i f(v_i y + r_i)) + b,     f(u) = exp(-u^2/2)

with per-sample parameters (a, b, w, v, r) produced by a conditioner network
from the conditioning features. The normalizer N = (sum_i |w_i v_i| + delta)/eps
with eps < 1 keeps the slope strictly positive, so the map is invertible.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .models import Mlp

# raw conditioner output that maps to slope a = softplus(raw) + 1e-3 == 1
_A_RAW_IDENTITY = math.log(math.expm1(1.0 - 1e-3))


class MtaLayer:
    """One flow layer plus its conditioner network."""

    def __init__(
        self,
        cond_dim: int,
        width: int = 32,
        cond_hidden: int = 64,
        eps: float = 0.9,
        delta: float = 1e-6,
        rng: np.random.Generator | None = None,
        index: int = 0,
    ):
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        if not delta > 0.0:
            raise ValueError(f"delta must be positive, got {delta}")
        self.cond_dim = cond_dim
        self.width = width
        self.eps = eps
        self.delta = delta
        self.index = index
        rng = rng or np.random.default_rng(0)
        self.conditioner = Mlp(
            [cond_dim, cond_hidden, 2 + 3 * width], rng, name=f"flow{index}/cond"
        )
        # start near the identity: zero the output weights, bias the slope to 1.
        # The bump parameters w, v, r get nonzero biases because the
        # normalizer sum|w_i v_i| + delta is singular at w = 0 and gradients
        # blow up there.
        self.conditioner.weights[-1].data[:] = 0.0
        bias = self.conditioner.biases[-1].data
        bias[0] = _A_RAW_IDENTITY
        bias[1] = 0.0
        bias[2 : 2 + width] = 0.25 * rng.standard_normal(width)
        bias[2 + width : 2 + 2 * width] = 0.5 * rng.standard_normal(width)
        bias[2 + 2 * width :] = rng.standard_normal(width)

    def params(self) -> list[Tensor]:
        return self.conditioner.params()

    def _split(self, cond: Tensor):
        raw = self.conditioner(cond)
        if not np.all(np.isfinite(raw.data)):
            raise FloatingPointError(
                f"flow layer {self.index}: non-finite conditioner output"
            )
        k = self.width
        a = raw[:, 0:1].softplus() + 1e-3
        b = raw[:, 1 : 2]
        w = raw[:, 2 : 2 + k]
        v = raw[:, 2 + k : 2 + 2 * k]
        r = raw[:, 2 + 2 * k : 2 + 3 * k]
        norm = ((w * v).abs().sum(axis=1, keepdims=True) + self.delta) * (1.0 / self.eps)
        return a, b, w, v, r, norm

    def tau_forward(self, y: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Map y -> (z, log tau') for one layer; both shaped (n, 1)."""
        if y.ndim == 1:
            y = y.reshape(y.shape[0], 1)
        a, b, w, v, r, norm = self._split(cond)
        u = v * y + r
        bump = (u * u * -0.5).exp()
        z = a * (y + (w * bump).sum(axis=1, keepdims=True) / norm) + b
        slope = 1.0 + (w * v * (-u) * bump).sum(axis=1, keepdims=True) / norm
        logderiv = (a * slope).log()
        return z, logderiv

    # -- numeric (gradient-free) evaluation, used for sampling -----------------

    def _params_np(self, cond: np.ndarray):
        raw_t = self.conditioner(Tensor(cond))
        raw = raw_t.data
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError(
                f"flow layer {self.index}: non-finite conditioner output"
            )
        k = self.width
        a = np.logaddexp(0.0, raw[:, 0:1]) + 1e-3
        b = raw[:, 1:2]
        w = raw[:, 2 : 2 + k]
        v = raw[:, 2 + k : 2 + 2 * k]
        r = raw[:, 2 + 2 * k : 2 + 3 * k]
        norm = (np.sum(np.abs(w * v), axis=1, keepdims=True) + self.delta) / self.eps
        return a, b, w, v, r, norm

    @staticmethod
    def _tau_np(y, params):
        a, b, w, v, r, norm = params
        u = v * y[:, None] + r
        bump = np.exp(-0.5 * u * u)
        return (a * (y[:, None] + np.sum(w * bump, axis=1, keepdims=True) / norm) + b)[
            :, 0
        ]

    def tau_inverse(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Invert one layer by bracketed bisection plus Newton polish.

        The bracket grows geometrically away from the affine inverse
        (z - b) / a; strict monotonicity guarantees a sign change exists.
        """
        z = np.asarray(z, dtype=np.float64)
        return self._invert_with_params(z, self._params_np(cond))

    def _invert_with_params(self, z: np.ndarray, params) -> np.ndarray:
        a, b, w, v, r, norm = params
        n, k = w.shape
        a0, b0, n0 = a[:, 0], b[:, 0], norm[:, 0]
        # scratch reused across all solver iterations; the (n, k) bump
        # buffers are what dominates the cost of a naive implementation
        bu = np.empty((n, k))
        bb = np.empty((n, k))

        def tau(y):
            nonlocal bu, bb
            np.multiply(v, y[:, None], out=bu)
            bu += r
            np.square(bu, out=bb)
            bb *= -0.5
            np.exp(bb, out=bb)
            bb *= w
            return a0 * (y + bb.sum(axis=1) / n0) + b0

        def tau_and_slope(y):
            nonlocal bu, bb
            np.multiply(v, y[:, None], out=bu)
            bu += r
            np.square(bu, out=bb)
            bb *= -0.5
            np.exp(bb, out=bb)  # bb = f(u)
            bu *= -1.0
            bu *= bb  # bu = f'(u)
            bb *= w
            bu *= w
            bu *= v
            f_val = a0 * (y + bb.sum(axis=1) / n0) + b0
            slope = a0 * (1.0 + bu.sum(axis=1) / n0)
            return f_val, slope

        y0 = (z - b0) / a0
        # the perturbation is bounded by sum|w|/N, so this radius usually
        # brackets immediately; the doubling loop covers the rest
        radius = np.minimum(1.0, np.sum(np.abs(w), axis=1) / n0)
        lo, hi = y0 - radius, y0 + radius
        for attempt in range(101):
            bad = (tau(lo) > z) | (tau(hi) < z)
            if not bad.any():
                break
            if attempt == 100:
                raise RuntimeError(
                    f"flow layer {self.index}: bracket expansion exceeded "
                    "100 doublings; parameters look pathological"
                )
            radius = np.where(bad, np.maximum(radius, 1e-3) * 2.0, radius)
            lo = np.where(bad, y0 - radius, lo)
            hi = np.where(bad, y0 + radius, hi)
        for _ in range(18):
            mid = 0.5 * (lo + hi)
            high_side = tau(mid) >= z
            hi = np.where(high_side, mid, hi)
            lo = np.where(high_side, lo, mid)
        y = 0.5 * (lo + hi)
        scale = np.maximum(1.0, np.abs(z))
        for _ in range(8):
            f_val, slope = tau_and_slope(y)
            f_val -= z
            if np.max(np.abs(f_val) / scale) < 1e-12:
                break
            y = np.clip(y - f_val / slope, lo, hi)
        return y


class MtaFlowStack:
    """Composition of MTA layers with a standard normal base distribution."""

    def __init__(
        self,
        cond_dim: int,
        n_layers: int = 2,
        width: int = 32,
        cond_hidden: int = 64,
        rng: np.random.Generator | None = None,
    ):
        rng = rng or np.random.default_rng(0)
        self.layers = [
            MtaLayer(cond_dim, width=width, cond_hidden=cond_hidden, rng=rng, index=i)
            for i in range(n_layers)
        ]

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, y: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Map y -> (z, total log-derivative), both (n, 1)."""
        z = y.reshape(y.shape[0], 1) if y.ndim == 1 else y
        logdet = None
        for layer in self.layers:
            z, ld = layer.tau_forward(z, cond)
            logdet = ld if logdet is None else logdet + ld
        return z, logdet

    def inverse(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        y = np.asarray(z, dtype=np.float64)
        for layer in reversed(self.layers):
            y = layer.tau_inverse(y, cond)
        return y

    def sample_conditional(
        self, cond: np.ndarray, n_draws: int, rng: np.random.Generator
    ) -> np.ndarray:
        """Draw base-normal samples and pull them back per conditioning row;
        returns an (n, n_draws) matrix.

        Conditioner parameters are computed once per row and repeated across
        draws; the root finding runs in bounded-size chunks.
        """
        cond = np.asarray(cond, dtype=np.float64)
        n = cond.shape[0]
        u = rng.standard_normal((n, n_draws))
        per_layer = [layer._params_np(cond) for layer in self.layers]
        width = max(layer.width for layer in self.layers)
        rows_per_chunk = max(1, 2_000_000 // (width * n_draws))
        out = np.empty((n, n_draws))
        for r0 in range(0, n, rows_per_chunk):
            r1 = min(n, r0 + rows_per_chunk)
            y = u[r0:r1].reshape(-1)
            for layer, params in zip(reversed(self.layers), reversed(per_layer)):
                rep = tuple(np.repeat(p[r0:r1], n_draws, axis=0) for p in params)
                y = layer._invert_with_params(y, rep)
            out[r0:r1] = y.reshape(r1 - r0, n_draws)
        return out

    def predict_mean(
        self, cond: np.ndarray, n_draws: int, rng: np.random.Generator
    ) -> np.ndarray:
        return self.sample_conditional(cond, n_draws, rng).mean(axis=1)
