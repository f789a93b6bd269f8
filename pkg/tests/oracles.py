"""Independent numerical oracles shared by the test modules.

These deliberately avoid the library's own differentiation and estimator
code paths: gradients come from central finite differences, HSIC from an
explicit loop-built matrix computation.
"""

from __future__ import annotations

import numpy as np

from causaldg.autodiff import Tensor, zero_grad


def finite_difference_grads(build_loss, params: list[Tensor], h: float = 1e-5):
    """Central finite differences of a scalar loss w.r.t. every param entry.

    `build_loss` must re-evaluate the loss from the current param values
    each time it is called.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(build_loss().data)
            flat[i] = orig - h
            down = float(build_loss().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(build_loss, params: list[Tensor], rtol: float = 1e-4, atol: float = 1e-6):
    """Backprop vs finite differences, elementwise |a - n| <= atol + rtol|n|."""
    zero_grad(params)
    loss = build_loss()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_difference_grads(build_loss, params)
    for p, a, n in zip(params, analytic, numeric):
        np.testing.assert_allclose(
            a, n, rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch for {p.name or 'param'}",
        )


def hsic_matrix_oracle(a: np.ndarray, b: np.ndarray, sigma_a: float = 1.0, sigma_b: float = 1.0) -> float:
    """tr(K H K' H) / (n-1)^2 built entry by entry with explicit loops."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    b = np.atleast_2d(np.asarray(b, dtype=float).T).T
    n = a.shape[0]
    k = np.zeros((n, n))
    kp = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            k[i, j] = np.exp(-np.sum((a[i] - a[j]) ** 2) / (2.0 * sigma_a**2))
            kp[i, j] = np.exp(-np.sum((b[i] - b[j]) ** 2) / (2.0 * sigma_b**2))
    h = np.eye(n) - np.ones((n, n)) / n
    return float(np.trace(k @ h @ kp @ h) / (n - 1) ** 2)


def ols_fit(x: np.ndarray, y: np.ndarray):
    """Least squares with intercept; returns a predict callable."""
    design = np.column_stack([x, np.ones(x.shape[0])])
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)

    def predict(xq: np.ndarray) -> np.ndarray:
        return np.column_stack([xq, np.ones(xq.shape[0])]) @ coef

    return predict
