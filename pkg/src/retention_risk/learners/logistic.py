"""L2-regularised logistic regression by batch gradient descent."""
from __future__ import annotations

import warnings

import numpy as np


class ConvergenceWarning(UserWarning):
    pass


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def objective(params, X, y, l2_lambda) -> float:
    """Mean logistic loss + (l2_lambda / 2) * ||w||^2; params = [intercept, w...]."""
    b, w = params[0], params[1:]
    z = X @ w + b
    return float(np.mean(_log1pexp(z) - y * z) + 0.5 * l2_lambda * (w @ w))


def gradient(params, X, y, l2_lambda) -> np.ndarray:
    b, w = params[0], params[1:]
    resid = _sigmoid(X @ w + b) - y
    n = len(y)
    g = np.empty_like(params)
    g[0] = resid.sum() / n
    g[1:] = X.T @ resid / n + l2_lambda * w
    return g


def fit_logistic(X, y, l2_lambda=1e-3, max_iter=1000, tol=1e-6, armijo=1e-4):
    """Gradient descent with backtracking line search.

    Steps start from the Barzilai-Borwein estimate and halve until the Armijo
    condition holds, so the loss never increases. Returns
    (params, loss_trace, converged).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if len(y) == 0:
        raise ValueError("empty training set")
    params = np.zeros(X.shape[1] + 1)
    loss = objective(params, X, y, l2_lambda)
    g = gradient(params, X, y, l2_lambda)
    trace = [loss]
    step = 1.0
    prev_params = prev_g = None
    converged = False
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            converged = True
            break
        if prev_g is not None:
            s = params - prev_params
            d = g - prev_g
            sd = s @ d
            if sd > 0:
                step = (s @ s) / sd
        gg = g @ g
        while True:
            cand = params - step * g
            cand_loss = objective(cand, X, y, l2_lambda)
            if cand_loss <= loss - armijo * step * gg:
                break
            step *= 0.5
            if step < 1e-16:
                cand, cand_loss = params, loss
                break
        if cand_loss >= loss and step < 1e-16:
            break
        prev_params, prev_g = params, g
        params, loss = cand, cand_loss
        g = gradient(params, X, y, l2_lambda)
        trace.append(loss)
    else:
        converged = np.max(np.abs(g)) <= tol
    if not converged:
        warnings.warn(
            f"logistic regression did not converge in {max_iter} iterations"
            f" (max |gradient| {np.max(np.abs(g)):.3g} > tol {tol})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return params, trace, bool(converged)


def predict_logistic(params, X) -> np.ndarray:
    return _sigmoid(np.asarray(X, dtype=float) @ params[1:] + params[0])
