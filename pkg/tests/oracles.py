"""Independent reference implementations used as test oracles.

Everything here is coded straight from the defining formulas, separately
from the package internals, so agreement between the two is evidence rather
than tautology.
"""

import numpy as np
from scipy.optimize import minimize


def ems_reference(x, alpha, eps=1e-8, init_var=1.0):
    """Textbook exponential-moving-standardization recursion, per channel.

    mean_k = (1 - alpha) * x_k + alpha * mean_{k-1}, variance analogous,
    output (x_k - mean_k) / sqrt(max(var_k, eps)), mean seeded with the
    first sample and variance with init_var.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        mean = x[ch, 0]
        var = init_var
        for k in range(x.shape[1]):
            mean = (1.0 - alpha) * x[ch, k] + alpha * mean
            var = (1.0 - alpha) * (x[ch, k] - mean) ** 2 + alpha * var
            out[ch, k] = (x[ch, k] - mean) / np.sqrt(max(var, eps))
    return out


def central_fd(f, theta, coords, h=1e-5):
    """Central finite differences of scalar f at the given coordinates."""
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        tp = theta.copy()
        tm = theta.copy()
        tp[c] += h
        tm[c] -= h
        out[j] = (f(tp) - f(tm)) / (2.0 * h)
    return out


def softmax_risk_and_grad(theta, X, y, n_classes, weight_decay):
    """Mean cross-entropy + L2 risk and its gradient for a linear softmax
    classifier, written independently of the package's model code."""
    n, d = X.shape
    W = theta[: n_classes * d].reshape(n_classes, d)
    b = theta[n_classes * d :]
    z = X @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = np.arange(n)
    risk = -logp[idx, y].mean() + 0.5 * weight_decay * theta @ theta
    p = np.exp(logp)
    delta = p.copy()
    delta[idx, y] -= 1.0
    gW = delta.T @ X / n
    gb = delta.mean(axis=0)
    return risk, np.concatenate([gW.reshape(-1), gb]) + weight_decay * theta


def solve_convex_softmax(X, y, n_classes, weight_decay, tol=1e-8):
    """Risk minimizer to gradient norm <= tol: L-BFGS then a gradient polish.

    Needs weight_decay > 0 (or otherwise strongly convex data) so the
    minimizer is unique and the polish loop terminates.
    """
    P = n_classes * (X.shape[1] + 1)
    res = minimize(
        softmax_risk_and_grad,
        np.zeros(P),
        args=(X, y, n_classes, weight_decay),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 20000, "gtol": 1e-12, "ftol": 1e-18},
    )
    theta = res.x
    risk, g = softmax_risk_and_grad(theta, X, y, n_classes, weight_decay)
    lr = 1.0
    for _ in range(500_000):
        if np.linalg.norm(g) <= tol:
            break
        cand = theta - lr * g
        c_risk, c_g = softmax_risk_and_grad(cand, X, y, n_classes, weight_decay)
        if c_risk <= risk:
            theta, risk, g = cand, c_risk, c_g
            lr *= 1.1
        else:
            lr *= 0.5
    return theta, float(np.linalg.norm(g))
