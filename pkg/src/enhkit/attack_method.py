"""Method enhancement: perturb data so one model family outperforms another.

Raw gradients transfer well between model families, so the attack keeps
only the component of the target model's gradient that is orthogonal to
the competitor's, and adds a suppression term (the competitor's gradient
orthogonalized against the target's) weighted by eta:

    x' = x - lambda * (g1_perp - eta * g2_perp)

with g1, g2 unit per-sample gradients of the loss for the model to enhance
(f1) and the model to suppress (f2).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, feature_similarity, kfold
from .errors import ConfigError, EnhkitError
from .attack_within import EnhancementResult
from .harness import child_seed, crossval_accuracy
from .models import ModelSpec, fit, input_gradients

OBJECTIVES = ("loss", "decision_function")


@dataclass(frozen=True)
class MethodConfig:
    f1: ModelSpec  # model to enhance
    f2: ModelSpec  # model to avoid enhancing
    lam: float  # enhancement step size
    eta: float  # suppression coefficient
    n_folds: int = 10
    objective: str = "loss"
    seed: int = 0
    stratified: bool = True
    ffn_grad_seeds: int = 1  # average FFN gradients over this many init seeds

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lambda and eta must be nonnegative")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.ffn_grad_seeds < 1:
            raise ConfigError("ffn_grad_seeds must be >= 1")


@dataclass
class GradientPair:
    """Per-sample gradients and their mutually orthogonal components."""

    g1: np.ndarray
    g2: np.ndarray
    g1_perp: np.ndarray
    g2_perp: np.ndarray


def project_orthogonal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Component of ``a`` orthogonal to ``b``; degenerate ``b`` returns ``a``."""
    bb = float(b @ b)
    if bb <= 1e-24:  # |b| <= 1e-12
        return a.copy()
    return a - (float(a @ b) / bb) * b


def _loss_like_gradients(spec: ModelSpec, fold_seed: int, train: Dataset,
                         X_held, y_held, objective: str, ffn_grad_seeds: int) -> np.ndarray:
    """Unit per-sample gradients pointing uphill in the model's loss.

    FFN gradients may be averaged over several initialization seeds before
    normalization. The decision-function objective (binary/linear) is
    converted to its loss-like sign so the shared update rule applies.
    """
    # the same init seeds are reused in every fold: fold models then agree on
    # the shape of their decision regions, so the per-fold pushes compose into
    # one coherent arrangement instead of fold-specific noise
    n_seeds = ffn_grad_seeds if spec.kind == "feed_forward" else 1
    total = np.zeros_like(X_held)
    for s in range(n_seeds):
        model = fit(spec.with_seed(child_seed(spec.seed, "grad", s)), train)
        g = input_gradients(model, X_held, y_held, objective)
        if objective == "decision_function":
            g = -g  # margin gradient points downhill in the loss
        total += g
    g = total / n_seeds
    norms = np.linalg.norm(g, axis=1)
    zero = norms <= 1e-12
    safe = np.where(zero, 1.0, norms)
    return g / safe[:, None]


def enhance_method(data: Dataset, cfg: MethodConfig,
                   capture_pairs: bool = False) -> EnhancementResult:
    """Run the fold loop of the two-model attack; lambda=0 is the identity.

    Samples where both gradients vanish are skipped and recorded in the
    per-fold trace. With ``capture_pairs`` the per-sample GradientPair
    objects are kept in the trace for inspection.
    """
    plan = kfold(data, cfg.n_folds, stratified=cfg.stratified, seed=cfg.seed)
    X_new = data.features.copy()
    trace: list[dict] = []
    for k in range(cfg.n_folds):
        # fold models train on the working copy: folds already enhanced feed
        # the next fold's gradients, and the suppression term tracks whatever
        # signal the competitor has accumulated so far
        train = Dataset(X_new[plan.train_indices(k)],
                        data.labels[plan.train_indices(k)],
                        tuple(data.sample_ids[i] for i in plan.train_indices(k)),
                        name=data.name, role="training")
        held = plan.heldout_indices(k)
        X_held = X_new[held]
        y_held = data.labels[held]
        try:
            g1 = _loss_like_gradients(cfg.f1, k, train, X_held, y_held,
                                      cfg.objective, cfg.ffn_grad_seeds)
            g2 = _loss_like_gradients(cfg.f2, k, train, X_held, y_held,
                                      cfg.objective, cfg.ffn_grad_seeds)
        except EnhkitError as exc:
            raise type(exc)(f"fold {k} training failed: {exc}") from exc
        skipped = []
        pairs = []
        for row, idx in enumerate(held):
            a, b = g1[row], g2[row]
            if np.linalg.norm(a) <= 1e-12 and np.linalg.norm(b) <= 1e-12:
                skipped.append(int(idx))
                continue
            g1p = project_orthogonal(a, b)
            g2p = project_orthogonal(b, a)
            if capture_pairs:
                pairs.append(GradientPair(g1=a, g2=b, g1_perp=g1p, g2_perp=g2p))
            if cfg.lam > 0:
                X_new[idx] = X_held[row] - cfg.lam * (g1p - cfg.eta * g2p)
        record = {"fold": k, "heldout": [int(i) for i in held], "skipped": skipped}
        if capture_pairs:
            record["pairs"] = pairs
        trace.append(record)

    enhanced = data.with_features(
        X_new, role="enhanced",
        metadata={**data.metadata,
                  "provenance": {"attack": "method", "lambda": cfg.lam, "eta": cfg.eta,
                                 "objective": cfg.objective, "n_folds": cfg.n_folds,
                                 "seed": cfg.seed, "f1": cfg.f1.to_dict(),
                                 "f2": cfg.f2.to_dict(), "source": data.name}})
    eval_seed = child_seed(cfg.seed, "method-eval")
    acc_orig, _ = crossval_accuracy(data, cfg.f1, cfg.n_folds, [eval_seed],
                                    stratified=cfg.stratified)
    acc_enh, _ = crossval_accuracy(enhanced, cfg.f1, cfg.n_folds, [eval_seed],
                                   stratified=cfg.stratified)
    return EnhancementResult(
        enhanced=enhanced,
        delta=X_new - data.features,
        similarity_r=feature_similarity(data, enhanced),
        accuracy_original=acc_orig,
        accuracy_enhanced=acc_enh,
        per_fold_trace=trace,
        config={"attack": "method", "lambda": cfg.lam, "eta": cfg.eta,
                "objective": cfg.objective, "n_folds": cfg.n_folds, "seed": cfg.seed,
                "f1": cfg.f1.to_dict(), "f2": cfg.f2.to_dict()},
    )
