"""Experiment orchestration: cross-validated evaluation, transfer matrices,
parameter sweeps, and deterministic result files.

Every stochastic choice is reachable from a master seed through
:func:`child_seed`, a splittable counter scheme (SHA-256 over the labeled
path), so adding a model or repeat never shifts the seeds of the others.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, generate_shifted_pair, generate_synthetic, kfold, load_dataset, select_features
from .errors import ConfigError
from .models import ModelSpec, accuracy, fit, predict

EXPERIMENT_KINDS = ("within_sweep", "method_grid", "cross_run", "cross_size_sweep",
                    "transfer_matrix")


def child_seed(*parts) -> int:
    """Deterministic 32-bit seed derived from labeled parts."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class ResultRecord:
    experiment_id: str
    attack_kind: str
    source_model: str
    eval_model: str
    params: dict
    acc_mean: float
    acc_sd: float
    similarity_r: float | None = None
    seconds: float = 0.0

    def row(self, record_timing: bool = False) -> list[str]:
        param_str = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return [
            self.experiment_id, self.attack_kind, self.source_model, self.eval_model,
            param_str, _fmt(self.acc_mean), _fmt(self.acc_sd),
            _fmt(self.similarity_r) if self.similarity_r is not None else "",
            _fmt(self.seconds) if record_timing else "0",
        ]


RESULT_COLUMNS = ["experiment_id", "attack_kind", "source_model", "eval_model",
                  "params", "acc_mean", "acc_sd", "similarity_r", "seconds"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


# ---------------------------------------------------------------------------
# Cross-validated accuracy
# ---------------------------------------------------------------------------

def crossval_accuracy(data: Dataset, spec: ModelSpec, n_folds: int,
                      seeds, stratified: bool = True,
                      feature_fraction: float | None = None) -> tuple[float, float]:
    """Pooled K-fold accuracy, averaged over fold-plan seeds.

    Accuracy per seed is pooled correct/total across folds. With
    ``feature_fraction`` set, features are re-selected on each fold's
    training split (binary tasks only), so held-out rows never leak into
    the selection.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("at least one evaluation seed required")
    accs = []
    for seed in seeds:
        plan = kfold(data, n_folds, stratified=stratified, seed=seed)
        correct = 0
        for k in range(n_folds):
            tr = data.subset(plan.train_indices(k), role="training")
            held = plan.heldout_indices(k)
            X_held = data.features[held]
            if feature_fraction is not None and feature_fraction < 1.0:
                mask = select_features(tr, feature_fraction)
                tr = tr.with_features(mask.apply(tr.features))
                X_held = X_held[:, mask.selected]
            model = fit(spec.with_seed(child_seed(spec.seed, seed, k)), tr)
            correct += int(np.sum(predict(model, X_held) == data.labels[held]))
        accs.append(correct / data.n_samples)
    return float(np.mean(accs)), float(np.std(accs))


def transfer_matrix(original: Dataset, attack_outputs: dict[str, Dataset],
                    eval_specs: dict[str, ModelSpec], n_folds: int,
                    seeds, experiment_id: str = "transfer",
                    attack_kind: str = "within") -> list[ResultRecord]:
    """Evaluate every model spec on every enhanced dataset plus the original
    baseline column (source model "original")."""
    from .data import feature_similarity

    records = []
    columns = {"original": original}
    for src, ds in attack_outputs.items():
        if ds.features.shape != original.features.shape:
            raise ConfigError(f"enhanced dataset {src!r} shape mismatch with original")
        columns[src] = ds
    for src, ds in columns.items():
        sim = 1.0 if src == "original" else feature_similarity(original, ds)
        for name, spec in eval_specs.items():
            t0 = time.perf_counter()
            mean, sd = crossval_accuracy(ds, spec, n_folds, seeds)
            records.append(ResultRecord(
                experiment_id=experiment_id, attack_kind=attack_kind,
                source_model=src, eval_model=name, params={},
                acc_mean=mean, acc_sd=sd, similarity_r=sim,
                seconds=time.perf_counter() - t0))
    return records


# ---------------------------------------------------------------------------
# Experiment configuration and driver
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str
    dataset: dict  # path or synthetic recipe
    models: dict = field(default_factory=dict)  # name -> ModelSpec dict
    attack: dict = field(default_factory=dict)
    eval_seeds: list[int] = field(default_factory=lambda: [0])
    n_folds: int = 10
    output_dir: str | None = None
    experiment_id: str = "experiment"
    master_seed: int = 0
    jobs: int = 1
    record_timing: bool = False

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.eval_seeds:
            raise ConfigError("at least one evaluation seed required")

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment config keys: {sorted(extra)}")
        return ExperimentConfig(**d)


def resolve_dataset(source: dict) -> Dataset:
    """Build a dataset from a path or a synthetic recipe."""
    if "path" in source:
        return load_dataset(source["path"])
    kind = source.get("kind", "blocks")
    if kind == "blocks":
        return generate_synthetic(
            n_per_class=source["n_per_class"], n_features=source["n_features"],
            class_shift=source.get("class_shift", 0.0),
            noise_sd=source.get("noise_sd", 1.0), seed=source.get("seed", 0),
            name=source.get("name", "synthetic"))
    raise ConfigError(f"unknown dataset recipe kind {kind!r}")


def resolve_dataset_pair(source: dict) -> tuple[Dataset, Dataset]:
    if "train_path" in source:
        return load_dataset(source["train_path"]), load_dataset(source["gen_path"])
    if source.get("kind") == "cross_pair":
        return generate_shifted_pair(
            n_train_per_class=source["n_train_per_class"],
            n_gen_per_class=source["n_gen_per_class"],
            n_features=source["n_features"], signal_block=source["signal_block"],
            train_shift=source["train_shift"], gen_shift=source["gen_shift"],
            gen_flip_fraction=source["gen_flip_fraction"],
            noise_sd=source.get("noise_sd", 1.0), seed=source.get("seed", 0))
    raise ConfigError("cross experiments need train/gen paths or a cross_pair recipe")


def _parallel_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _model_specs(cfg: ExperimentConfig) -> dict[str, ModelSpec]:
    if not cfg.models:
        raise ConfigError("experiment config lists no models")
    return {name: ModelSpec.from_dict(d) for name, d in cfg.models.items()}


def run_experiment(cfg: ExperimentConfig) -> list[ResultRecord]:
    """Run one experiment and write results.csv, config_echo.json, traces,
    and plot-ready CSVs into the output directory."""
    from . import attack_cross, attack_method, attack_within  # lazy: avoids cycle

    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config_echo.json", "w", encoding="utf-8") as fh:
            json.dump(_config_echo(cfg), fh, indent=2, sort_keys=True)
            fh.write("\n")

    if cfg.kind == "within_sweep":
        records, plots = _run_within_sweep(cfg, attack_within)
    elif cfg.kind == "method_grid":
        records, plots = _run_method_grid(cfg, attack_method)
    elif cfg.kind == "cross_run":
        records, plots = _run_cross(cfg, attack_cross)
    elif cfg.kind == "cross_size_sweep":
        records, plots = _run_cross_size_sweep(cfg, attack_cross)
    else:
        records, plots = _run_transfer(cfg)

    records.sort(key=lambda r: (r.experiment_id, r.attack_kind, r.source_model,
                                r.eval_model, sorted(r.params.items())))
    if out:
        write_results_csv(out / "results.csv", records, record_timing=cfg.record_timing)
        for name, (header, rows) in plots.items():
            with open(out / name, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
    return records


def write_results_csv(path, records, record_timing: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in records:
            writer.writerow(r.row(record_timing=record_timing))


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {
        "kind": cfg.kind, "dataset": cfg.dataset, "models": cfg.models,
        "attack": cfg.attack, "eval_seeds": list(cfg.eval_seeds),
        "n_folds": cfg.n_folds, "experiment_id": cfg.experiment_id,
        "master_seed": cfg.master_seed,
    }


# -- experiment kinds --------------------------------------------------------

def _run_within_sweep(cfg, attack_within):
    from .data import feature_similarity

    data = resolve_dataset(cfg.dataset)
    specs = _model_specs(cfg)
    scales = cfg.attack.get("scales", [0.0, 1.0, 2.0])
    objective = cfg.attack.get("objective", "loss")
    records = []
    fig_rows = []

    def run_cell(cell):
        src_name, scale = cell
        t0 = time.perf_counter()
        wcfg = attack_within.WithinConfig(
            n_folds=cfg.n_folds, scale=scale, objective=objective,
            model=specs[src_name], seed=child_seed(cfg.master_seed, "within", src_name, scale))
        result = attack_within.enhance_within(data, wcfg)
        return cell, result, time.perf_counter() - t0

    cells = [(name, s) for name in specs for s in scales]
    for (src_name, scale), result, dt in _parallel_map(run_cell, cells, cfg.jobs):
        sim = result.similarity_r
        for eval_name, eval_spec in specs.items():
            mean, sd = crossval_accuracy(result.enhanced, eval_spec, cfg.n_folds, cfg.eval_seeds)
            records.append(ResultRecord(cfg.experiment_id, "within", src_name, eval_name,
                                        {"scale": scale}, mean, sd, sim, dt))
            fig_rows.append([src_name, eval_name, _fmt(scale), _fmt(mean), _fmt(sd), _fmt(sim)])
    # baseline column
    for eval_name, eval_spec in specs.items():
        mean, sd = crossval_accuracy(data, eval_spec, cfg.n_folds, cfg.eval_seeds)
        records.append(ResultRecord(cfg.experiment_id, "within", "original", eval_name,
                                    {}, mean, sd, 1.0, 0.0))
        fig_rows.append(["original", eval_name, "0", _fmt(mean), _fmt(sd), "1"])
    plots = {"fig_within_sweep.csv": (
        ["source_model", "eval_model", "scale", "acc_mean", "acc_sd", "similarity_r"],
        fig_rows)}
    return records, plots


def _run_method_grid(cfg, attack_method):
    data = resolve_dataset(cfg.dataset)
    specs = _model_specs(cfg)
    a = cfg.attack
    f1_name, f2_name = a["f1"], a["f2"]
    lambdas = a.get("lambdas", [0.0, 1.0])
    etas = a.get("etas", [0.0, 1.0])
    objective = a.get("objective", "loss")
    records = []
    fig_rows = []

    def run_cell(cell):
        lam, eta = cell
        t0 = time.perf_counter()
        mcfg = attack_method.MethodConfig(
            f1=specs[f1_name], f2=specs[f2_name], lam=lam, eta=eta,
            n_folds=cfg.n_folds, objective=objective,
            seed=child_seed(cfg.master_seed, "method", lam, eta),
            ffn_grad_seeds=a.get("ffn_grad_seeds", 1))
        result = attack_method.enhance_method(data, mcfg)
        return cell, result, time.perf_counter() - t0

    cells = [(lam, eta) for lam in lambdas for eta in etas]
    for (lam, eta), result, dt in _parallel_map(run_cell, cells, cfg.jobs):
        for eval_name, eval_spec in specs.items():
            mean, sd = crossval_accuracy(result.enhanced, eval_spec, cfg.n_folds, cfg.eval_seeds)
            records.append(ResultRecord(cfg.experiment_id, "method", f"{f1_name}-over-{f2_name}",
                                        eval_name, {"lambda": lam, "eta": eta},
                                        mean, sd, result.similarity_r, dt))
            fig_rows.append([_fmt(lam), _fmt(eta), eval_name, _fmt(mean), _fmt(sd),
                             _fmt(result.similarity_r)])
    for eval_name, eval_spec in specs.items():
        mean, sd = crossval_accuracy(data, eval_spec, cfg.n_folds, cfg.eval_seeds)
        records.append(ResultRecord(cfg.experiment_id, "method", "original", eval_name,
                                    {}, mean, sd, 1.0, 0.0))
        fig_rows.append(["0", "0", f"original:{eval_name}", _fmt(mean), _fmt(sd), "1"])
    plots = {"fig_method_grid.csv": (
        ["lambda", "eta", "eval_model", "acc_mean", "acc_sd", "similarity_r"], fig_rows)}
    return records, plots


def _run_cross(cfg, attack_cross):
    train, gen = resolve_dataset_pair(cfg.dataset)
    specs = _model_specs(cfg)
    a = cfg.attack
    records = []
    fig_rows = []
    traces = {}
    for name, spec in specs.items():
        t0 = time.perf_counter()
        ccfg = attack_cross.CrossConfig(
            n_e=a.get("n_e", 50), iter_max=a.get("iter_max", 20),
            lam=a.get("lambda", 0.15), feature_fraction=a.get("feature_fraction", 0.10),
            model=spec, tau=a.get("tau", 0.5),
            seed=child_seed(cfg.master_seed, "cross", name),
            early_stop_accuracy=a.get("early_stop_accuracy"))
        result, trace = attack_cross.enhance_cross(train, gen, ccfg)
        dt = time.perf_counter() - t0
        traces[name] = trace
        records.append(ResultRecord(cfg.experiment_id, "cross", name, name,
                                    {"n_e": ccfg.n_e, "lambda": ccfg.lam},
                                    trace.best_gen_accuracy, 0.0, result.similarity_r, dt))
        for pt in trace.points:
            fig_rows.append([name, name, str(pt["order"] + 1), _fmt(pt["reselected_accuracy"]),
                             _fmt(pt["within_accuracy"]) if pt.get("within_accuracy") is not None else ""])
        # transfer: other models evaluated on the enhanced training set
        for eval_name, eval_spec in specs.items():
            if eval_name == name:
                continue
            acc = attack_cross.evaluate_generalization(result.enhanced, gen, eval_spec,
                                                       ccfg.feature_fraction)
            records.append(ResultRecord(cfg.experiment_id, "cross", name, eval_name,
                                        {"n_e": ccfg.n_e, "lambda": ccfg.lam},
                                        acc, 0.0, result.similarity_r, 0.0))
    plots = {"fig_cross_run.csv": (
        ["source_model", "eval_model", "points_enhanced", "gen_accuracy", "within_accuracy"],
        fig_rows)}
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        for name, trace in traces.items():
            with open(out / f"trace_cross_{name}.jsonl", "w", encoding="utf-8") as fh:
                for pt in trace.points:
                    fh.write(json.dumps(pt, sort_keys=True) + "\n")
    return records, plots


def _run_cross_size_sweep(cfg, attack_cross):
    train, gen_pool = resolve_dataset_pair(cfg.dataset)
    specs = _model_specs(cfg)
    a = cfg.attack
    sizes = a.get("sizes", [100, 200, 400])
    repeats = a.get("repeats", 5)
    records = []
    fig_rows = []
    for name, spec in specs.items():
        ccfg = attack_cross.CrossConfig(
            n_e=a.get("n_e", 50), iter_max=a.get("iter_max", 20),
            lam=a.get("lambda", 0.15), feature_fraction=a.get("feature_fraction", 0.10),
            model=spec, tau=a.get("tau", 0.5),
            seed=child_seed(cfg.master_seed, "cross_size", name),
            early_stop_accuracy=a.get("early_stop_accuracy"))
        table = attack_cross.sweep_generalization_size(train, gen_pool, sizes, repeats, ccfg)
        for row in table:
            records.append(ResultRecord(cfg.experiment_id, "cross_size", name, name,
                                        {"size": row["size"]},
                                        row["mean"], row["sd"], None, row["seconds"]))
            fig_rows.append([name, str(row["size"]), _fmt(row["mean"]), _fmt(row["sd"])])
    plots = {"fig_cross_size.csv": (["model", "gen_size", "best_acc_mean", "best_acc_sd"],
                                    fig_rows)}
    return records, plots


def _run_transfer(cfg):
    original = resolve_dataset(cfg.dataset)
    specs = _model_specs(cfg)
    enhanced = {}
    for name, path in cfg.attack.get("enhanced", {}).items():
        enhanced[name] = load_dataset(path)
    records = transfer_matrix(original, enhanced, specs, cfg.n_folds, cfg.eval_seeds,
                              experiment_id=cfg.experiment_id,
                              attack_kind=cfg.attack.get("attack_kind", "within"))
    rows = [[r.source_model, r.eval_model, _fmt(r.acc_mean), _fmt(r.acc_sd),
             _fmt(r.similarity_r)] for r in records]
    plots = {"fig_transfer.csv": (
        ["source_model", "eval_model", "acc_mean", "acc_sd", "similarity_r"], rows)}
    return records, plots
