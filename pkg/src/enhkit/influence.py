"""Gradients of generalization loss with respect to a single training point.

These are the bilevel-optimization gradients behind cross-dataset
enhancement: holding the training problem at its optimum, how does moving
one training sample change the loss a fitted model incurs on an external
generalization set?

Sign convention: every routine returns the gradient of the generalization
loss itself, so a *descent* step (x_e minus lambda times the gradient)
reduces generalization loss, i.e. enhances. The outer loss is the mean of
each model family's own per-sample loss over the supplied generalization
subset: hinge for the SVM, logistic loss for LR, softmax cross-entropy for
the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericalError
from .models import ModelSpec, TrainedModel, make_network
from .models.ffn import Network, one_hot
from .models.logistic import sigmoid

RIDGE = 1e-8
SV_TOL = 1e-10


@dataclass
class SvmInfluenceState:
    """Intermediates of the SVM implicit-differentiation system."""

    support: np.ndarray  # margin (free) support-vector indices
    v: np.ndarray  # Q_ss^{-1} y_s
    zeta: float  # y_s' Q_ss^{-1} y_s
    M: np.ndarray  # (n_active_gen, n_support) per-generalization-point rows
    alpha_e: float
    u: np.ndarray  # current position of the enhancement point


@dataclass
class LrInfluenceState:
    """Intermediates of the logistic-regression block system."""

    sigma: np.ndarray  # per-training-sample probability of the true class
    z: np.ndarray  # sigma * (1 - sigma)
    C: float
    hessian: np.ndarray  # (d+1, d+1) block matrix including the bias row
    rhs: np.ndarray  # (d+1,) generalization-loss gradient in (w, b)


@dataclass
class InfluenceResult:
    gradient: np.ndarray
    non_support: bool = False
    state: object | None = field(default=None, repr=False)


@dataclass(frozen=True)
class BackGradConfig:
    """Controls the reversed training loop."""

    T: int  # training steps to reverse
    inner_rate: float  # step size of the (recorded) full-batch descent
    hvp_mode: str = "analytic_double_backprop"  # or "finite_difference"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.hvp_mode not in ("analytic_double_backprop", "finite_difference"):
            raise ConfigError(f"unknown hvp_mode {self.hvp_mode!r}")


def _require_plain_binary(model: TrainedModel, what: str):
    if not model.binary:
        raise ConfigError(f"{what} supports binary models only")
    if model.scaler is not None:
        raise ConfigError(f"{what} requires a model fit without input standardization")


# ---------------------------------------------------------------------------
# SVM (implicit differentiation of the KKT system)
# ---------------------------------------------------------------------------

def svm_influence_gradient(model: TrainedModel, train: Dataset, e: int,
                           gen_subset: Dataset, capture_state: bool = False) -> InfluenceResult:
    """Gradient of mean hinge loss on ``gen_subset`` w.r.t. training point e.

    Only support vectors influence the fitted SVM; a point with a zero dual
    coefficient returns a zero gradient with ``non_support`` set. The linear
    system is built on the margin (free) support vectors, whose margins the
    optimum pins at one; Q_ss is ridge-stabilized before inversion.
    """
    _require_plain_binary(model, "svm_influence_gradient")
    if gen_subset.n_samples == 0:
        raise ConfigError("empty generalization subset")
    if not (0 <= e < train.n_samples):
        raise ConfigError(f"enhancement index {e} out of range")
    return svm_influence_core(model, train.features, 2.0 * train.labels - 1.0, e,
                              gen_subset.features, 2.0 * gen_subset.labels - 1.0,
                              capture_state)


def svm_influence_core(model: TrainedModel, X: np.ndarray, y: np.ndarray, e: int,
                       Xg: np.ndarray, yg: np.ndarray,
                       capture_state: bool = False) -> InfluenceResult:
    """Array-level form of :func:`svm_influence_gradient`; y, yg in {-1, +1}."""
    alpha = model.alpha
    C = model.spec.C
    alpha_e = float(alpha[e])
    d = X.shape[1]
    if alpha_e <= SV_TOL:
        return InfluenceResult(gradient=np.zeros(d), non_support=True)

    y_e = y[e]
    m = Xg.shape[0]
    margins = yg * (Xg @ model.w + model.b)
    active = margins < 1.0
    if not np.any(active):
        return InfluenceResult(gradient=np.zeros(d), non_support=False)
    Xga = Xg[active]
    yga = yg[active]

    free = np.flatnonzero((alpha > SV_TOL) & (alpha < C - SV_TOL))
    if free.size > 0:
        Xs = X[free]
        ys = y[free]
        Qss = (ys[:, None] * ys[None, :]) * (Xs @ Xs.T)
        Qss[np.diag_indices_from(Qss)] += RIDGE
        try:
            v = np.linalg.solve(Qss, ys)
            K_ks = Xga @ Xs.T
            Q_ks = (yga[:, None] * ys[None, :]) * K_ks
            QinvQks = np.linalg.solve(Qss, Q_ks.T).T  # rows: Q_ks Q_ss^{-1}
        except np.linalg.LinAlgError:
            raise NumericalError("singular Q_ss in SVM influence system") from None
        zeta = float(ys @ v)
        if abs(zeta) < 1e-14:
            raise NumericalError("degenerate zeta in SVM influence system")
        M = -(1.0 / zeta) * (zeta * QinvQks - np.outer(Q_ks @ v, v) + np.outer(yga, v))
        dQse_du = (ys * y_e)[:, None] * Xs  # (n_s, d)
        sum_dg = alpha_e * (M.sum(axis=0) @ dQse_du + (yga * y_e) @ Xga)
    else:
        v = np.zeros(0)
        zeta = float("nan")
        M = np.zeros((int(active.sum()), 0))
        sum_dg = alpha_e * ((yga * y_e) @ Xga)

    grad = -sum_dg / m
    state = None
    if capture_state:
        state = SvmInfluenceState(support=free, v=v, zeta=zeta, M=M,
                                  alpha_e=alpha_e, u=X[e].copy())
    return InfluenceResult(gradient=grad, non_support=False, state=state)


# ---------------------------------------------------------------------------
# Logistic regression (stationarity of the regularized training objective)
# ---------------------------------------------------------------------------

def lr_influence_gradient(model: TrainedModel, train: Dataset, e: int,
                          gen_subset: Dataset, capture_state: bool = False) -> InfluenceResult:
    """Gradient of mean logistic loss on ``gen_subset`` w.r.t. training point e.

    Solves the (d+1)-dimensional block system in (w, b) obtained by
    differentiating the training stationarity condition; the bias is part of
    the system but carries no regularizer.
    """
    _require_plain_binary(model, "lr_influence_gradient")
    if gen_subset.n_samples == 0:
        raise ConfigError("empty generalization subset")
    if not (0 <= e < train.n_samples):
        raise ConfigError(f"enhancement index {e} out of range")
    return lr_influence_core(model, train.features, 2.0 * train.labels - 1.0, e,
                             gen_subset.features, 2.0 * gen_subset.labels - 1.0,
                             capture_state)


def lr_influence_core(model: TrainedModel, X: np.ndarray, y: np.ndarray, e: int,
                      Xg: np.ndarray, yg: np.ndarray,
                      capture_state: bool = False) -> InfluenceResult:
    """Array-level form of :func:`lr_influence_gradient`; y, yg in {-1, +1}."""
    w, b, C = model.w, float(model.b), model.spec.C
    d = X.shape[1]

    raw_margin = X @ w + b
    t = (y + 1.0) / 2.0
    sig = sigmoid(raw_margin)
    z = sig * (1.0 - sig)

    H = np.empty((d + 1, d + 1))
    H[:d, :d] = C * (X.T * z) @ X
    H[:d, :d][np.diag_indices(d)] += 1.0
    H[:d, d] = C * (X.T @ z)
    H[d, :d] = H[:d, d]
    H[d, d] = C * float(z.sum())
    H[np.diag_indices(d + 1)] += RIDGE
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(f"ill-conditioned logistic Hessian (cond={cond:.2e})")

    # mixed second derivative of the training objective w.r.t. (w, b) and x_e
    z_e = float(z[e])
    r_e = float(sig[e] - t[e])
    J = np.empty((d + 1, d))
    J[:d, :] = C * (r_e * np.eye(d) + z_e * np.outer(X[e], w))
    J[d, :] = C * z_e * w

    tg = (yg + 1.0) / 2.0
    sig_g = sigmoid(Xg @ w + b)
    m = Xg.shape[0]
    rhs = np.concatenate([Xg.T @ (sig_g - tg), [float(np.sum(sig_g - tg))]]) / m

    sol = np.linalg.solve(H, rhs)
    grad = -J.T @ sol
    state = None
    if capture_state:
        # sigma reported as the probability assigned to the true class
        sigma_true = np.where(y > 0, sig, 1.0 - sig)
        state = LrInfluenceState(sigma=sigma_true, z=z, C=C, hessian=H, rhs=rhs)
    return InfluenceResult(gradient=grad, non_support=False, state=state)


# ---------------------------------------------------------------------------
# Feed-forward network (reversed gradient-descent trajectory)
# ---------------------------------------------------------------------------

def back_gradient_from_network(net: Network, X: np.ndarray, labels: np.ndarray,
                               e: int, gen_X: np.ndarray, gen_labels: np.ndarray,
                               cfg: BackGradConfig) -> np.ndarray:
    """Reverse a recorded full-batch descent trajectory to differentiate the
    generalization loss with respect to training input row ``e``."""
    if net.trajectory is None:
        raise ConfigError("network has no recorded training trajectory")
    if len(net.trajectory) != cfg.T + 1:
        raise ConfigError(
            f"trajectory has {len(net.trajectory) - 1} steps, config expects {cfg.T}")
    k = net.n_classes
    Y = one_hot(labels, k)
    Yg = one_hot(gen_labels, k)
    n = X.shape[0]
    rate = cfg.inner_rate
    fd = cfg.hvp_mode == "finite_difference"

    params_T = net.trajectory[-1]
    zs, acts = net._forward(gen_X, params_T)
    # adjoint of the mean generalization cross-entropy w.r.t. the weights
    p = np.exp(acts[-1] - acts[-1].max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    delta = (p - Yg) / gen_X.shape[0]
    dw, _ = net._backward(zs, acts, delta, params_T)
    dxe = np.zeros(X.shape[1])

    x_e = X[e]
    y_e = Y[e]
    for t in range(cfg.T, 0, -1):
        prev = net.trajectory[t - 1]
        if fd:
            mixed = net.hvp_mixed_input_fd(x_e, y_e, dw, n, prev)
            hv = net.hvp_params_fd(X, Y, dw, prev)
        else:
            mixed = net.hvp_mixed_input(x_e, y_e, dw, n, prev)
            hv = net.hvp_params(X, Y, dw, prev)
        dxe = dxe - rate * mixed
        dw = [a - rate * h for a, h in zip(dw, hv)]
        if not np.all(np.isfinite(dxe)):
            raise NumericalError(f"non-finite back-gradient state at reversal step {t}")
    return dxe


def fit_recorded_ffn(spec: ModelSpec, X: np.ndarray, labels: np.ndarray,
                     n_classes: int, steps: int, rate: float) -> Network:
    """Full-batch descent from the spec's seeded initialization, recording
    the whole weight trajectory for later reversal."""
    net = make_network(spec, X.shape[1], n_classes)
    net.train_gd(X, one_hot(labels, n_classes), rate, steps, record=True)
    return net


def ffn_back_gradient(spec: ModelSpec, train: Dataset, e: int,
                      gen_subset: Dataset, cfg: BackGradConfig) -> np.ndarray:
    """Train the network with recorded full-batch descent for cfg.T steps,
    then reverse the loop (see :func:`back_gradient_from_network`)."""
    if spec.kind != "feed_forward":
        raise ConfigError("ffn_back_gradient requires a feed-forward spec")
    if spec.standardize:
        raise ConfigError("ffn_back_gradient requires standardize=False")
    net = fit_recorded_ffn(spec, train.features, train.labels, train.n_classes,
                           cfg.T, cfg.inner_rate)
    return back_gradient_from_network(net, train.features, train.labels, e,
                                      gen_subset.features, gen_subset.labels, cfg)
