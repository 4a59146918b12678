"""Cross-dataset enhancement: sequentially perturb a budget of low-confidence
training points so that a model fit on the released training set scores
falsely well on an untouched external generalization dataset.

The attack fixes a top-fraction feature mask up front (the bilevel systems
need a stable dimensionality), walks the candidate points in order of
ascending cross-validated |decision function|, and for each point runs up
to ``iter_max`` influence-gradient descent steps on the generalization
loss, keeping the iterate with the highest generalization accuracy. The
honest evaluation protocol re-selects features from scratch, so the
reported accuracy curve may wobble even though the fixed-mask curve is
monotone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attack_within import EnhancementResult
from .data import Dataset, feature_similarity, kfold, select_features
from .errors import ConfigError, EnhkitError
from .harness import child_seed, crossval_accuracy
from .influence import (BackGradConfig, back_gradient_from_network,
                        fit_recorded_ffn, lr_influence_core, svm_influence_core)
from .models import ModelSpec, TrainedModel, decision_function, fit, predict
from .models.logistic import fit_binary_logistic
from .models.svm import solve_svm_dual


@dataclass(frozen=True)
class CrossConfig:
    n_e: int  # enhancement point budget
    iter_max: int  # gradient steps per point
    lam: float  # step size
    model: ModelSpec
    feature_fraction: float = 0.10
    tau: float = 0.5  # |DF| below this counts as low confidence
    seed: int = 0
    select_folds: int = 10
    within_folds: int = 10
    hvp_mode: str = "analytic_double_backprop"
    early_stop_accuracy: float | None = None

    def __post_init__(self):
        if self.n_e < 0:
            raise ConfigError("n_e must be nonnegative")
        if self.iter_max < 1:
            raise ConfigError("iter_max must be >= 1")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if not (0.0 < self.feature_fraction <= 1.0):
            raise ConfigError("feature_fraction must be in (0, 1]")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if self.model.standardize:
            raise ConfigError("cross-dataset attack requires standardize=False models")
        if self.model.kind == "feed_forward" and self.model.optimizer != "gd":
            raise ConfigError(
                "cross-dataset FFN attacks need optimizer='gd' (reversible training)")


@dataclass
class CrossTrace:
    """Per-point attack log plus the before/after summary numbers."""

    points: list[dict] = field(default_factory=list)
    baseline_fixed_accuracy: float = 0.0
    baseline_gen_accuracy: float = 0.0
    final_gen_accuracy: float = 0.0
    best_gen_accuracy: float = 0.0
    within_before: float = 0.0
    within_after: float = 0.0
    gen_hash: str = ""
    n_rows_changed: int = 0
    mask_indices: list[int] = field(default_factory=list)


def select_enhancement_points(train: Dataset, spec: ModelSpec, n_e: int,
                              k_folds: int = 10, seed: int = 0,
                              return_scores: bool = False):
    """Training points ordered by ascending cross-validated |DF|.

    Each point's decision value comes from the fold model that held it out;
    ties break toward the lowest index. Returns the first ``n_e`` indices.
    """
    if train.n_classes != 2:
        raise ConfigError("enhancement point selection requires binary labels")
    if n_e > train.n_samples:
        raise ConfigError(f"n_e={n_e} exceeds n_samples={train.n_samples}")
    plan = kfold(train, k_folds, stratified=True, seed=seed)
    df = np.empty(train.n_samples)
    for k in range(k_folds):
        model = fit(spec.with_seed(child_seed(spec.seed, "select", seed, k)),
                    train.subset(plan.train_indices(k), role="training"))
        held = plan.heldout_indices(k)
        df[held] = decision_function(model, train.features[held])
    order = np.argsort(np.abs(df), kind="stable")[:n_e]
    if return_scores:
        return order, np.abs(df)[order]
    return order


def evaluate_generalization(train: Dataset, gen: Dataset, spec: ModelSpec,
                            feature_fraction: float) -> float:
    """Honest protocol: re-select features on the (possibly enhanced)
    training set, fit, and score the untouched generalization set."""
    mask = select_features(train, feature_fraction)
    model = fit(spec, train.with_features(mask.apply(train.features), role="training"))
    return float(np.mean(predict(model, mask.apply(gen.features)) == gen.labels))


def _refit(spec: ModelSpec, X: np.ndarray, labels: np.ndarray,
           warm: TrainedModel | None) -> TrainedModel:
    """Fit on masked arrays, warm-starting SVM/LR; FFN restarts from its
    fixed seed so the recorded trajectory matches the reversal."""
    d = X.shape[1]
    if spec.kind == "linear_svm":
        y = 2.0 * labels - 1.0
        sol = solve_svm_dual(X, y, spec.C,
                             alpha0=warm.alpha if warm is not None else None)
        return TrainedModel(spec=spec, n_classes=2, n_features=d, w=sol.w, b=sol.b,
                            alpha=sol.alpha, kkt_residual=sol.kkt_residual,
                            duality_gap=sol.duality_gap)
    if spec.kind == "logistic_regression":
        y = 2.0 * labels - 1.0
        sol = fit_binary_logistic(X, y, spec.C,
                                  w0=warm.w if warm is not None else None,
                                  b0=warm.b if warm is not None else 0.0)
        return TrainedModel(spec=spec, n_classes=2, n_features=d, w=sol.w, b=sol.b)
    net = fit_recorded_ffn(spec, X, labels, 2, spec.inner_iters, spec.learning_rate)
    return TrainedModel(spec=spec, n_classes=2, n_features=d, net=net)


def _influence_gradient(cfg: CrossConfig, model: TrainedModel, Xm, labels, y_pm,
                        e: int, fail_idx: np.ndarray, Xg, yg_pm, gen_labels):
    """Dispatch to the model family's influence routine on the failing subset.

    The routines return gradients of the subset's *mean* loss; the attack
    optimizes the *sum* over failing points (the step-size convention the
    lambda default is calibrated for), so the result is rescaled by the
    subset size. Returns (gradient, non_support).
    """
    if cfg.model.kind == "linear_svm":
        res = svm_influence_core(model, Xm, y_pm, e, Xg[fail_idx], yg_pm[fail_idx])
        return res.gradient * fail_idx.size, res.non_support
    if cfg.model.kind == "logistic_regression":
        res = lr_influence_core(model, Xm, y_pm, e, Xg[fail_idx], yg_pm[fail_idx])
        return res.gradient * fail_idx.size, res.non_support
    bg_cfg = BackGradConfig(T=cfg.model.inner_iters, inner_rate=cfg.model.learning_rate,
                            hvp_mode=cfg.hvp_mode)
    grad = back_gradient_from_network(model.net, Xm, labels, e,
                                      Xg[fail_idx], gen_labels[fail_idx], bg_cfg)
    return grad * fail_idx.size, False


def enhance_cross(train: Dataset, gen: Dataset,
                  cfg: CrossConfig) -> tuple[EnhancementResult, CrossTrace]:
    """Run the full attack; the generalization dataset is never modified
    (checked by content hash before and after)."""
    if train.n_classes != 2 or gen.n_classes != 2:
        raise ConfigError("cross-dataset enhancement is binary only")
    gen_hash = gen.content_hash()

    mask = select_features(train, cfg.feature_fraction)
    sel = mask.indices
    Xm = train.features[:, mask.selected].copy()
    Xg = gen.features[:, mask.selected]
    labels = train.labels
    y_pm = 2.0 * labels - 1.0
    gen_labels = gen.labels
    yg_pm = 2.0 * gen_labels - 1.0

    masked_train = train.with_features(train.features[:, mask.selected], role="training")
    order, scores = select_enhancement_points(
        masked_train, cfg.model, cfg.n_e, cfg.select_folds,
        seed=child_seed(cfg.seed, "select"), return_scores=True)

    model = _refit(cfg.model, Xm, labels, warm=None)

    def fixed_acc(m: TrainedModel) -> float:
        return float(np.mean(predict(m, Xg) == gen_labels))

    trace = CrossTrace(mask_indices=[int(j) for j in sel])
    trace.baseline_fixed_accuracy = fixed_acc(model)
    trace.baseline_gen_accuracy = evaluate_generalization(
        train, gen, cfg.model, cfg.feature_fraction)
    within_seed = child_seed(cfg.seed, "within-eval")
    trace.within_before, _ = crossval_accuracy(
        train, cfg.model, cfg.within_folds, [within_seed],
        feature_fraction=cfg.feature_fraction)

    X_full = train.features.copy()
    cum_best = trace.baseline_fixed_accuracy
    best_reselected = trace.baseline_gen_accuracy
    last_reselected = trace.baseline_gen_accuracy
    changed_rows: set[int] = set()
    any_gradient = cfg.n_e == 0

    for rank, e in enumerate(order):
        e = int(e)
        x_accept = Xm[e].copy()
        model_accept = model
        accepted_iter = 0
        iter_accs: list[float] = []
        stopped = None
        for it in range(1, cfg.iter_max + 1):
            df = decision_function(model, Xg)
            failing = (predict(model, Xg) != gen_labels) | (np.abs(df) < cfg.tau)
            fail_idx = np.flatnonzero(failing)
            if fail_idx.size == 0:
                stopped = "no_failing_points"
                any_gradient = True  # nothing left to fix is not a degenerate run
                break
            grad, non_support = _influence_gradient(
                cfg, model, Xm, labels, y_pm, e, fail_idx, Xg, yg_pm, gen_labels)
            if non_support or float(np.linalg.norm(grad)) <= 1e-14:
                stopped = "zero_gradient"
                break
            any_gradient = True
            Xm[e] = Xm[e] - cfg.lam * grad
            model = _refit(cfg.model, Xm, labels, warm=model)
            acc = fixed_acc(model)
            iter_accs.append(acc)
            if acc > cum_best:
                cum_best = acc
                x_accept = Xm[e].copy()
                model_accept = model
                accepted_iter = it
        Xm[e] = x_accept
        model = model_accept
        if accepted_iter > 0:
            X_full[e, sel] = x_accept
            changed_rows.add(e)
        enhanced_so_far = train.with_features(X_full, role="enhanced")
        last_reselected = evaluate_generalization(
            enhanced_so_far, gen, cfg.model, cfg.feature_fraction)
        best_reselected = max(best_reselected, last_reselected)
        within_acc, _ = crossval_accuracy(
            enhanced_so_far, cfg.model, cfg.within_folds, [within_seed],
            feature_fraction=cfg.feature_fraction)
        trace.points.append({
            "order": rank, "index": e, "abs_df": float(scores[rank]),
            "iter_accuracies": [float(a) for a in iter_accs],
            "accepted_iter": accepted_iter,
            "cumulative_best_fixed": float(cum_best),
            "reselected_accuracy": float(last_reselected),
            "within_accuracy": float(within_acc),
            "stopped": stopped,
        })
        if cfg.early_stop_accuracy is not None and last_reselected >= cfg.early_stop_accuracy:
            break

    if cfg.n_e > 0 and not any_gradient:
        raise EnhkitError("every candidate point had a zero influence gradient")
    if gen.content_hash() != gen_hash:
        raise EnhkitError("generalization dataset was modified during the attack")

    enhanced = train.with_features(
        X_full, role="enhanced",
        metadata={**train.metadata,
                  "provenance": {"attack": "cross", "n_e": cfg.n_e,
                                 "iter_max": cfg.iter_max, "lambda": cfg.lam,
                                 "feature_fraction": cfg.feature_fraction,
                                 "tau": cfg.tau, "seed": cfg.seed,
                                 "model": cfg.model.to_dict(), "source": train.name}})
    trace.final_gen_accuracy = last_reselected
    trace.best_gen_accuracy = best_reselected
    trace.within_after, _ = crossval_accuracy(
        enhanced, cfg.model, cfg.within_folds, [within_seed],
        feature_fraction=cfg.feature_fraction)
    trace.gen_hash = gen_hash
    trace.n_rows_changed = len(changed_rows)

    result = EnhancementResult(
        enhanced=enhanced,
        delta=X_full - train.features,
        similarity_r=feature_similarity(train, enhanced),
        accuracy_original=trace.baseline_gen_accuracy,
        accuracy_enhanced=trace.final_gen_accuracy,
        per_fold_trace=[],
        config={"attack": "cross", "n_e": cfg.n_e, "iter_max": cfg.iter_max,
                "lambda": cfg.lam, "feature_fraction": cfg.feature_fraction,
                "tau": cfg.tau, "seed": cfg.seed, "model": cfg.model.to_dict()},
    )
    return result, trace


def sweep_generalization_size(train: Dataset, gen_pool: Dataset, sizes: list[int],
                              repeats: int, cfg: CrossConfig) -> list[dict]:
    """Repeat the attack against random generalization subsets of several
    sizes; returns one record per size with best-accuracy mean and sd."""
    if max(sizes) > gen_pool.n_samples:
        raise ConfigError("generalization subset size exceeds pool")
    table = []
    for size in sizes:
        best = []
        t0 = time.perf_counter()
        for rep in range(repeats):
            rng = np.random.default_rng(child_seed(cfg.seed, "gen-subset", size, rep))
            while True:
                idx = rng.choice(gen_pool.n_samples, size=size, replace=False)
                if len(np.unique(gen_pool.labels[idx])) == gen_pool.n_classes:
                    break
            subset = gen_pool.subset(np.sort(idx), role="generalization")
            _, trace = enhance_cross(train, subset, cfg)
            best.append(trace.best_gen_accuracy)
        table.append({"size": size, "mean": float(np.mean(best)),
                      "sd": float(np.std(best)), "repeats": repeats,
                      "seconds": time.perf_counter() - t0})
    return table
