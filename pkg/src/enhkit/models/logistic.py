"""L2-regularized logistic regression.

Objective convention (binary, labels in {-1, +1}):

    F(w, b) = 0.5 ||w||^2 + C * sum_i log(1 + exp(-y_i (w.x_i + b)))

The data-fit weight C multiplies the loss and the ridge term carries unit
weight; the bias is unregularized. Binary problems use a damped Newton
solver (the Hessian blocks double as the influence-gradient system);
multinomial problems use trust-region Newton-CG with exact Hessian-vector
products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import linalg as sparse_linalg

from ..errors import NumericalError

GRAD_TOL = 1e-8


def sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log1pexp(t: np.ndarray) -> np.ndarray:
    """log(1 + exp(t)) without overflow."""
    out = np.empty_like(t, dtype=np.float64)
    big = t > 30
    out[big] = t[big]
    out[~big] = np.log1p(np.exp(t[~big]))
    return out


@dataclass
class LogisticSolution:
    w: np.ndarray
    b: float
    grad_norm: float
    iterations: int


def _objective_parts(X, y, w, b, C):
    margins = y * (X @ w + b)
    obj = 0.5 * float(w @ w) + C * float(np.sum(log1pexp(-margins)))
    # d/dm log(1+exp(-y m)) = sigma(m) - t,  t = (y+1)/2
    t = (y + 1.0) / 2.0
    sig = sigmoid(X @ w + b)
    gw = w + C * (X.T @ (sig - t))
    gb = C * float(np.sum(sig - t))
    return obj, gw, gb, sig


def fit_binary_logistic(X: np.ndarray, y: np.ndarray, C: float,
                        w0: np.ndarray | None = None, b0: float = 0.0,
                        max_iter: int = 100) -> LogisticSolution:
    """Damped Newton to gradient norm <= 1e-8; y must be in {-1, +1}."""
    n, d = X.shape
    w = np.zeros(d) if w0 is None else w0.astype(np.float64).copy()
    b = float(b0)
    obj, gw, gb, sig = _objective_parts(X, y, w, b, C)
    for it in range(max_iter):
        gnorm = float(np.sqrt(gw @ gw + gb * gb))
        if gnorm <= GRAD_TOL:
            return LogisticSolution(w=w, b=b, grad_norm=gnorm, iterations=it)
        z = sig * (1.0 - sig)
        H = np.empty((d + 1, d + 1))
        H[:d, :d] = C * (X.T * z) @ X
        H[:d, :d][np.diag_indices(d)] += 1.0
        H[:d, d] = C * (X.T @ z)
        H[d, :d] = H[:d, d]
        H[d, d] = C * float(z.sum())
        g = np.concatenate([gw, [gb]])
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-10 * np.eye(d + 1), -g)
        # full Newton step when it contracts the gradient (near the optimum
        # the objective decrease falls below float resolution), else Armijo
        w_new = w + step[:d]
        b_new = b + step[d]
        obj_new, gw_new, gb_new, sig_new = _objective_parts(X, y, w_new, b_new, C)
        gnorm_new = float(np.sqrt(gw_new @ gw_new + gb_new * gb_new))
        if gnorm_new > 0.5 * gnorm:
            t_ls = 1.0
            for _ in range(60):
                w_new = w + t_ls * step[:d]
                b_new = b + t_ls * step[d]
                obj_new, gw_new, gb_new, sig_new = _objective_parts(X, y, w_new, b_new, C)
                if obj_new <= obj + 1e-4 * t_ls * float(g @ step):
                    break
                t_ls *= 0.5
        w, b, obj, gw, gb, sig = w_new, b_new, obj_new, gw_new, gb_new, sig_new
    gnorm = float(np.sqrt(gw @ gw + gb * gb))
    if gnorm > GRAD_TOL:
        raise NumericalError(f"logistic Newton did not converge: |grad|={gnorm:.2e}")
    return LogisticSolution(w=w, b=b, grad_norm=gnorm, iterations=max_iter)


# ---------------------------------------------------------------------------
# Multinomial (softmax) variant
# ---------------------------------------------------------------------------

def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MultinomialSolution:
    W: np.ndarray  # (k, d)
    b: np.ndarray  # (k,)
    grad_norm: float


def fit_multinomial_logistic(X: np.ndarray, labels: np.ndarray, n_classes: int,
                             C: float, max_iter: int = 300) -> MultinomialSolution:
    """Softmax regression: 0.5 sum_c ||w_c||^2 + C * sum_i CE_i.

    Biases are unregularized; their softmax gauge direction is neutralized
    with a tiny ridge inside the Hessian-vector product only.
    """
    n, d = X.shape
    k = n_classes
    Y = np.zeros((n, k))
    Y[np.arange(n), labels] = 1.0

    def unpack(theta):
        W = theta[: k * d].reshape(k, d)
        b = theta[k * d:]
        return W, b

    def fun_grad(theta):
        W, b = unpack(theta)
        scores = X @ W.T + b
        P = softmax(scores)
        logp = scores - scores.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        loss = 0.5 * float(np.sum(W * W)) - C * float(np.sum(logp[np.arange(n), labels]))
        G = P - Y
        gW = W + C * (G.T @ X)
        gb = C * G.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    def hessp(theta, v):
        W, b = unpack(theta)
        Vw, vb = unpack(v)
        P = softmax(X @ W.T + b)
        S = X @ Vw.T + vb
        dP = P * (S - np.sum(P * S, axis=1, keepdims=True))
        hW = Vw + C * (dP.T @ X)
        hb = C * dP.sum(axis=0) + 1e-10 * vb  # neutralize the bias gauge
        return np.concatenate([hW.ravel(), hb])

    # inexact Newton: CG on the (positive definite) Hessian-vector product,
    # with a forcing term that tightens near the optimum
    theta = np.zeros(k * (d + 1))
    loss, g = fun_grad(theta)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= GRAD_TOL:
            W, b = unpack(theta)
            return MultinomialSolution(W=W, b=b, grad_norm=gnorm)
        op = sparse_linalg.LinearOperator((theta.size, theta.size),
                                          matvec=lambda v: hessp(theta, v))
        rtol = max(min(0.1, np.sqrt(gnorm)), 1e-12)
        step, _ = sparse_linalg.cg(op, -g, rtol=rtol, maxiter=max(1000, theta.size))
        if not np.all(np.isfinite(step)) or float(g @ step) >= 0:
            step = -g
        # accept on gradient contraction first; Armijo otherwise
        cand = theta + step
        loss_new, g_new = fun_grad(cand)
        if float(np.linalg.norm(g_new)) > 0.5 * gnorm:
            t_ls = 1.0
            for _ in range(60):
                cand = theta + t_ls * step
                loss_new, g_new = fun_grad(cand)
                if loss_new <= loss + 1e-4 * t_ls * float(g @ step):
                    break
                t_ls *= 0.5
        theta, loss, g = cand, loss_new, g_new
    gnorm = float(np.linalg.norm(g))
    if gnorm > GRAD_TOL:
        raise NumericalError(f"multinomial logistic did not converge: |grad|={gnorm:.2e}")
    W, b = unpack(theta)
    return MultinomialSolution(W=W, b=b, grad_norm=gnorm)
