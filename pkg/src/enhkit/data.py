"""Datasets, tabular I/O, synthetic generators, fold plans, and feature tools.

A Dataset is an immutable labeled feature matrix with a role tag. Roles
distinguish the pristine data ("original"), data used to fit models
("training"), an external evaluation set ("generalization"), and attack
output ("enhanced").
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

ROLES = ("training", "generalization", "enhanced", "original")


@dataclass(frozen=True)
class Dataset:
    """Labeled feature matrix. Arrays are frozen after construction."""

    features: np.ndarray  # (n_samples, n_features) float64
    labels: np.ndarray  # (n_samples,) int, dense ids 0..n_classes-1
    sample_ids: tuple[str, ...]
    name: str = "dataset"
    role: str = "original"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ConfigError("features must be a 2-D matrix")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ConfigError("labels length must equal feature row count")
        if len(self.sample_ids) != feats.shape[0]:
            raise ConfigError("sample_ids length must equal feature row count")
        if not np.all(np.isfinite(feats)):
            raise ConfigError("non-finite feature value in dataset")
        if labels.size == 0:
            raise ConfigError("empty dataset")
        if labels.min() < 0:
            raise ConfigError("labels must be nonnegative dense ids")
        n_classes = int(labels.max()) + 1
        present = np.bincount(labels, minlength=n_classes)
        if np.any(present == 0):
            raise ConfigError("every class id below the max must be present")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}; expected one of {ROLES}")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def with_features(self, features: np.ndarray, role: str | None = None,
                      name: str | None = None, metadata: dict | None = None) -> "Dataset":
        """Copy of this dataset with replaced features (labels/order kept)."""
        return Dataset(
            features=np.array(features, dtype=np.float64),
            labels=self.labels.copy(),
            sample_ids=self.sample_ids,
            name=self.name if name is None else name,
            role=self.role if role is None else role,
            metadata=dict(self.metadata) if metadata is None else metadata,
        )

    def subset(self, indices: np.ndarray, role: str | None = None) -> "Dataset":
        """Row subset; requires every class to stay represented."""
        idx = np.asarray(indices)
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            name=self.name,
            role=self.role if role is None else role,
            metadata=dict(self.metadata),
        )

    def content_hash(self) -> str:
        """SHA-256 over feature bytes and label bytes; order-sensitive."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of every sample to exactly one of n_folds folds."""

    n_folds: int
    assignments: np.ndarray  # (n_samples,) fold index per sample
    stratified: bool
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        a.flags.writeable = False
        object.__setattr__(self, "assignments", a)
        sizes = np.bincount(a, minlength=self.n_folds)
        if sizes.max() - sizes.min() > 1:
            raise ConfigError("fold sizes differ by more than one sample")

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def heldout_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)


@dataclass(frozen=True)
class FeatureMask:
    """Top-fraction feature selection by absolute two-sample t statistic."""

    selected: np.ndarray  # (n_features,) bool
    fraction: float
    statistic: np.ndarray  # (n_features,) |t| scores

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool)
        stat = np.asarray(self.statistic, dtype=np.float64)
        sel.flags.writeable = False
        stat.flags.writeable = False
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "statistic", stat)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.selected)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.selected]


# ---------------------------------------------------------------------------
# Tabular I/O
# ---------------------------------------------------------------------------

def _format_float(v: float) -> str:
    # 17 significant digits round-trips IEEE doubles exactly
    return format(v, ".17g")


def load_tabular(path: str | Path, label_column: str = "label") -> Dataset:
    """Load a comma-delimited file with a header row into a Dataset.

    Labels are mapped to dense integer ids in order of first appearance;
    the original values are kept in ``metadata["label_mapping"]``. An ``id``
    column, when present, supplies sample ids.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    if label_column not in header:
        raise ConfigError(f"{path}: missing label column {label_column!r}")
    label_idx = header.index(label_column)
    id_idx = header.index("id") if "id" in header else None
    feat_cols = [i for i in range(len(header)) if i not in (label_idx, id_idx)]

    mapping: dict[str, int] = {}
    labels = []
    ids = []
    feats = np.empty((len(rows), len(feat_cols)), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ConfigError(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")
        raw = row[label_idx]
        if raw not in mapping:
            mapping[raw] = len(mapping)
        labels.append(mapping[raw])
        ids.append(row[id_idx] if id_idx is not None else f"s{r:06d}")
        for c, col in enumerate(feat_cols):
            try:
                v = float(row[col])
            except ValueError:
                raise ConfigError(
                    f"{path}: non-numeric feature cell at row {r + 2}, column {header[col]!r}"
                ) from None
            if not math.isfinite(v):
                raise ConfigError(f"{path}: non-finite feature at row {r + 2}, column {header[col]!r}")
            feats[r, c] = v

    return Dataset(
        features=feats,
        labels=np.array(labels),
        sample_ids=tuple(ids),
        name=path.stem,
        role="original",
        metadata={"label_mapping": [str(k) for k in mapping],
                  "feature_names": [header[c] for c in feat_cols]},
    )


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """Persist a dataset bundle: ``features.csv`` plus ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mapping = ds.metadata.get("label_mapping") or [str(c) for c in range(ds.n_classes)]
    names = ds.metadata.get("feature_names") or [f"f{j}" for j in range(ds.n_features)]
    with open(directory / "features.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *names, "label"])
        for i in range(ds.n_samples):
            writer.writerow([
                ds.sample_ids[i],
                *(_format_float(v) for v in ds.features[i]),
                mapping[ds.labels[i]],
            ])
    meta = {
        "name": ds.name,
        "role": ds.role,
        "label_mapping": list(mapping),
        "feature_names": list(names),
        "n_samples": ds.n_samples,
        "n_features": ds.n_features,
        "provenance": ds.metadata.get("provenance"),
    }
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    """Load a bundle written by :func:`save_dataset`."""
    directory = Path(directory)
    with open(directory / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    ds = load_tabular(directory / "features.csv", label_column="label")
    # the stored mapping wins over first-appearance order
    mapping = meta["label_mapping"]
    remap = {lbl: i for i, lbl in enumerate(mapping)}
    file_mapping = ds.metadata["label_mapping"]
    labels = np.array([remap[file_mapping[l]] for l in ds.labels])
    return Dataset(
        features=ds.features.copy(),
        labels=labels,
        sample_ids=ds.sample_ids,
        name=meta["name"],
        role=meta["role"],
        metadata={"label_mapping": mapping,
                  "feature_names": meta.get("feature_names", ds.metadata["feature_names"]),
                  "provenance": meta.get("provenance")},
    )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def generate_synthetic(n_per_class: list[int], n_features: int, class_shift: float,
                       noise_sd: float, seed: int, name: str = "synthetic") -> Dataset:
    """Gaussian block-mean classes.

    Class c gets mean ``class_shift`` on its own block of
    ceil(n_features / n_classes) features and zero elsewhere, plus i.i.d.
    Gaussian noise. ``class_shift = 0`` gives chance-level separability.
    """
    if not n_per_class:
        raise ConfigError("n_per_class must be nonempty")
    if n_features < 1:
        raise ConfigError("n_features must be >= 1")
    if noise_sd <= 0:
        raise ConfigError("noise_sd must be positive")
    if class_shift < 0:
        raise ConfigError("class_shift must be nonnegative")
    rng = np.random.default_rng(seed)
    k = len(n_per_class)
    block = math.ceil(n_features / k)
    feats = []
    labels = []
    for c, n_c in enumerate(n_per_class):
        mu = np.zeros(n_features)
        mu[c * block:min((c + 1) * block, n_features)] = class_shift
        feats.append(mu + rng.normal(0.0, noise_sd, size=(n_c, n_features)))
        labels.extend([c] * n_c)
    X = np.vstack(feats)
    return Dataset(
        features=X,
        labels=np.array(labels),
        sample_ids=tuple(f"s{i:06d}" for i in range(X.shape[0])),
        name=name,
        role="original",
        metadata={"label_mapping": [str(c) for c in range(k)],
                  "recipe": {"kind": "blocks", "n_per_class": list(n_per_class),
                             "n_features": n_features, "class_shift": class_shift,
                             "noise_sd": noise_sd, "seed": seed}},
    )


def generate_shifted_pair(n_train_per_class: list[int], n_gen_per_class: list[int],
                          n_features: int, signal_block: int, train_shift: float,
                          gen_shift: float, gen_flip_fraction: float, noise_sd: float,
                          seed: int, gen_label_noise: float = 0.0) -> tuple[Dataset, Dataset]:
    """Binary train/generalization pair with a controlled distribution shift.

    Both datasets carry class signal on the same leading ``signal_block``
    features (so the block survives t-test selection on the training set),
    but the generalization set flips the sign of the last
    ``gen_flip_fraction`` of the block, and optionally carries a fraction of
    flipped labels. A model fit on the training set therefore transfers only
    partially, which pins the baseline generalization accuracy below the
    within-dataset accuracy.
    """
    if len(n_train_per_class) != 2 or len(n_gen_per_class) != 2:
        raise ConfigError("shifted pair generator is binary only")
    if signal_block > n_features:
        raise ConfigError("signal_block exceeds n_features")
    rng = np.random.default_rng(seed)
    flip = int(round(gen_flip_fraction * signal_block))

    def build(n_per_class, shift, flip_tail, role, name):
        feats, labels = [], []
        for c, n_c in enumerate(n_per_class):
            sign = 1.0 if c == 1 else -1.0
            mu = np.zeros(n_features)
            mu[:signal_block] = sign * shift
            if flip_tail and flip > 0:
                mu[signal_block - flip:signal_block] *= -1.0
            feats.append(mu + rng.normal(0.0, noise_sd, size=(n_c, n_features)))
            labels.extend([c] * n_c)
        X = np.vstack(feats)
        labels = np.array(labels)
        if flip_tail and gen_label_noise > 0:
            n_flip = int(round(gen_label_noise * len(labels)))
            idx = rng.choice(len(labels), size=n_flip, replace=False)
            labels[idx] = 1 - labels[idx]
        return Dataset(
            features=X, labels=labels,
            sample_ids=tuple(f"{name}{i:06d}" for i in range(X.shape[0])),
            name=name, role=role,
            metadata={"label_mapping": ["0", "1"]},
        )

    train = build(n_train_per_class, train_shift, False, "training", "train")
    gen = build(n_gen_per_class, gen_shift, True, "generalization", "gen")
    return train, gen


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

def kfold(dataset: Dataset, n_folds: int, stratified: bool = True, seed: int = 0) -> FoldPlan:
    """Deterministic K-fold partition; stratified keeps per-fold class
    proportions within one sample of the global proportions."""
    n = dataset.n_samples
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2")
    if n_folds > n:
        raise ConfigError(f"n_folds={n_folds} exceeds n_samples={n}")
    rng = np.random.default_rng(seed)
    assignments = np.empty(n, dtype=np.int64)
    if not stratified:
        order = rng.permutation(n)
        sizes = np.full(n_folds, n // n_folds)
        sizes[: n % n_folds] += 1
        start = 0
        for f, sz in enumerate(sizes):
            assignments[order[start:start + sz]] = f
            start += sz
    else:
        fold_counts = np.zeros(n_folds, dtype=np.int64)
        for c in range(dataset.n_classes):
            idx = np.flatnonzero(dataset.labels == c)
            idx = idx[rng.permutation(len(idx))]
            base, extra = divmod(len(idx), n_folds)
            # extras go to the currently smallest folds (ties: lowest index)
            order = np.lexsort((np.arange(n_folds), fold_counts))
            sizes = np.full(n_folds, base)
            sizes[order[:extra]] += 1
            start = 0
            for f in range(n_folds):
                assignments[idx[start:start + sizes[f]]] = f
                start += sizes[f]
            fold_counts += sizes
    return FoldPlan(n_folds=n_folds, assignments=assignments, stratified=stratified, seed=seed)


# ---------------------------------------------------------------------------
# Feature selection and similarity
# ---------------------------------------------------------------------------

def two_sample_t(X: np.ndarray, y: np.ndarray, variant: str = "pooled") -> np.ndarray:
    """Per-feature two-sample t statistic for binary labels.

    Features with zero variance in both classes get statistic 0.
    """
    g0 = X[y == 0]
    g1 = X[y == 1]
    n0, n1 = len(g0), len(g1)
    if n0 < 2 or n1 < 2:
        raise ConfigError("each class needs at least two samples for a t statistic")
    m0, m1 = g0.mean(axis=0), g1.mean(axis=0)
    v0 = g0.var(axis=0, ddof=1)
    v1 = g1.var(axis=0, ddof=1)
    if variant == "pooled":
        sp2 = ((n0 - 1) * v0 + (n1 - 1) * v1) / (n0 + n1 - 2)
        denom = np.sqrt(sp2 * (1.0 / n0 + 1.0 / n1))
    elif variant == "welch":
        denom = np.sqrt(v0 / n0 + v1 / n1)
    else:
        raise ConfigError(f"unknown t-test variant {variant!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, (m1 - m0) / denom, 0.0)
    return t


def select_features(train: Dataset, fraction: float, variant: str = "pooled") -> FeatureMask:
    """Top-``fraction`` features of the training split by |t|, ties to the
    lowest feature index. Uses the training split only."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError("fraction must be in (0, 1]")
    if train.n_classes != 2:
        raise ConfigError("feature selection requires binary labels")
    t = two_sample_t(train.features, train.labels, variant=variant)
    score = np.abs(t)
    count = math.ceil(fraction * train.n_features)
    # stable sort on -score keeps the lowest index first among ties
    order = np.argsort(-score, kind="stable")
    selected = np.zeros(train.n_features, dtype=bool)
    selected[order[:count]] = True
    return FeatureMask(selected=selected, fraction=fraction, statistic=score)


def feature_similarity(a: Dataset, b: Dataset) -> float:
    """Pearson correlation of the two flattened feature matrices."""
    if a.features.shape != b.features.shape:
        raise ConfigError("feature_similarity requires identical shapes")
    x = a.features.ravel()
    y = b.features.ravel()
    xc = x - x.mean()
    yc = y - y.mean()
    nx = float(np.dot(xc, xc))
    ny = float(np.dot(yc, yc))
    if nx == 0.0 or ny == 0.0:
        raise ConfigError("feature_similarity undefined for zero-variance matrices")
    return float(np.dot(xc, yc) / math.sqrt(nx * ny))


def standardize_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sd per feature for z-scoring; zero sd maps to 1."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd
