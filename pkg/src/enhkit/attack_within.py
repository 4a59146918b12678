"""Within-dataset enhancement: push every held-out sample a fixed distance
along the learned model's gradient so that an independent re-evaluation of
the released dataset reports inflated cross-validated accuracy.

Each sample is perturbed exactly once, by the model trained on the folds
that do not contain it; the per-sample step has unit direction and length
``scale``, so similarity to the original data degrades smoothly with scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, feature_similarity, kfold
from .errors import ConfigError, EnhkitError
from .harness import child_seed, crossval_accuracy
from .models import ModelSpec, enhancement_directions, fit

OBJECTIVES = ("loss", "decision_function")


@dataclass(frozen=True)
class WithinConfig:
    n_folds: int
    scale: float  # per-sample step length applied to the unit gradient
    model: ModelSpec
    objective: str = "loss"
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.scale < 0:
            raise ConfigError("scale must be nonnegative")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")


@dataclass
class EnhancementResult:
    """Shared result shape for all attack families."""

    enhanced: Dataset
    delta: np.ndarray  # enhanced minus original features
    similarity_r: float
    accuracy_original: float
    accuracy_enhanced: float
    per_fold_trace: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def enhance_within(data: Dataset, cfg: WithinConfig) -> EnhancementResult:
    """Run the K-fold enhancement pass and re-evaluate with a fresh plan.

    The re-evaluation uses a fold seed different from the attack's, so the
    reported inflation is what an independent analyst would measure.
    """
    plan = kfold(data, cfg.n_folds, stratified=cfg.stratified, seed=cfg.seed)
    X_new = data.features.copy()
    trace: list[dict] = []
    for k in range(cfg.n_folds):
        train = data.subset(plan.train_indices(k), role="training")
        held = plan.heldout_indices(k)
        try:
            model = fit(cfg.model, train)
        except EnhkitError as exc:
            raise type(exc)(f"fold {k} training failed: {exc}") from exc
        dirs, zero_mask = enhancement_directions(
            model, data.features[held], data.labels[held], cfg.objective)
        if cfg.scale > 0:
            X_new[held] = data.features[held] + cfg.scale * dirs
        trace.append({
            "fold": k,
            "heldout": [int(i) for i in held],
            "gradient_norms_unit": [0.0 if z else 1.0 for z in zero_mask],
            "skipped": [int(i) for i, z in zip(held, zero_mask) if z],
        })

    enhanced = data.with_features(
        X_new, role="enhanced",
        metadata={**data.metadata,
                  "provenance": {"attack": "within", "scale": cfg.scale,
                                 "objective": cfg.objective, "model": cfg.model.to_dict(),
                                 "n_folds": cfg.n_folds, "seed": cfg.seed,
                                 "source": data.name}})
    eval_seed = child_seed(cfg.seed, "within-eval")
    acc_orig, _ = crossval_accuracy(data, cfg.model, cfg.n_folds, [eval_seed],
                                    stratified=cfg.stratified)
    acc_enh, _ = crossval_accuracy(enhanced, cfg.model, cfg.n_folds, [eval_seed],
                                   stratified=cfg.stratified)
    return EnhancementResult(
        enhanced=enhanced,
        delta=X_new - data.features,
        similarity_r=feature_similarity(data, enhanced),
        accuracy_original=acc_orig,
        accuracy_enhanced=acc_enh,
        per_fold_trace=trace,
        config={"attack": "within", "n_folds": cfg.n_folds, "scale": cfg.scale,
                "objective": cfg.objective, "seed": cfg.seed,
                "model": cfg.model.to_dict()},
    )
