"""Classifier families: linear SVM, logistic regression, feed-forward net.

All models expose the same surface: fit, decision_function, predict, and
input_gradient. Binary problems map class id 1 to +1 and class id 0 to -1
internally; multiclass linear models are one-vs-rest (SVM) or multinomial
softmax (LR).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ..data import Dataset, FeatureMask, standardize_stats
from ..errors import ConfigError
from . import ffn as ffn_mod
from .logistic import fit_binary_logistic, fit_multinomial_logistic, sigmoid, softmax
from .svm import solve_svm_dual

KINDS = ("linear_svm", "logistic_regression", "feed_forward")
_ALIASES = {
    "svm": "linear_svm", "linear_svm": "linear_svm",
    "lr": "logistic_regression", "logistic": "logistic_regression",
    "logistic_regression": "logistic_regression",
    "ffn": "feed_forward", "feed_forward": "feed_forward",
}

OBJECTIVES = ("loss", "decision_function")


def canonical_kind(kind: str) -> str:
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Declarative classifier configuration."""

    kind: str
    C: float = 1.0
    layers: tuple[int, ...] | None = None  # FFN widths incl. input/output
    activation: str = "relu"
    learning_rate: float = 0.001
    epochs: int = 10
    batch_size: int = 10
    inner_iters: int = 400  # full-batch steps in the "gd" regime
    optimizer: str = "adam"  # "adam" (mini-batch) or "gd" (full batch, recorded)
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", canonical_kind(self.kind))
        if self.C <= 0:
            raise ConfigError("C must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.layers is not None:
            if len(self.layers) < 2:
                raise ConfigError("layers must list at least input and output widths")
            object.__setattr__(self, "layers", tuple(int(w) for w in self.layers))
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError("optimizer must be 'adam' or 'gd'")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "C": self.C,
            "layers": list(self.layers) if self.layers else None,
            "activation": self.activation, "learning_rate": self.learning_rate,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "inner_iters": self.inner_iters, "optimizer": self.optimizer,
            "seed": self.seed, "standardize": self.standardize,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("layers"):
            d["layers"] = tuple(d["layers"])
        return ModelSpec(**d)

    def with_seed(self, seed: int) -> "ModelSpec":
        return replace(self, seed=seed)


@dataclass
class TrainedModel:
    spec: ModelSpec
    n_classes: int
    n_features: int
    w: np.ndarray | None = None  # (d,) binary or (k, d) multiclass
    b: np.ndarray | float | None = None
    alpha: np.ndarray | None = None  # (n,) binary SVM or (k, n) one-vs-rest
    net: ffn_mod.Network | None = field(default=None, repr=False)
    scaler: tuple[np.ndarray, np.ndarray] | None = None
    kkt_residual: float = 0.0
    duality_gap: float = 0.0
    training_feature_mask: FeatureMask | None = None

    @property
    def binary(self) -> bool:
        return self.n_classes == 2

    def support_indices(self, class_index: int | None = None, tol: float = 1e-10) -> np.ndarray:
        a = self.alpha if self.binary else self.alpha[class_index]
        return np.flatnonzero(a > tol)


def _subseed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _scale_inputs(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    if model.scaler is None:
        return X
    mu, sd = model.scaler
    return (X - mu) / sd


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def fit(spec: ModelSpec, train: Dataset) -> TrainedModel:
    """Train a classifier; deterministic given (spec, train)."""
    if train.n_classes < 2:
        raise ConfigError("single-class training set")
    X = train.features
    scaler = None
    if spec.standardize:
        scaler = standardize_stats(X)
        X = (X - scaler[0]) / scaler[1]
    labels = train.labels
    k = train.n_classes
    d = X.shape[1]

    if spec.kind == "linear_svm":
        if k == 2:
            y = 2.0 * labels - 1.0
            sol = solve_svm_dual(X, y, spec.C)
            return TrainedModel(spec=spec, n_classes=k, n_features=d, w=sol.w, b=sol.b,
                                alpha=sol.alpha, scaler=scaler,
                                kkt_residual=sol.kkt_residual, duality_gap=sol.duality_gap)
        W = np.zeros((k, d))
        b = np.zeros(k)
        alpha = np.zeros((k, X.shape[0]))
        kkt = gap = 0.0
        for c in range(k):
            y = np.where(labels == c, 1.0, -1.0)
            sol = solve_svm_dual(X, y, spec.C)
            W[c], b[c], alpha[c] = sol.w, sol.b, sol.alpha
            kkt = max(kkt, sol.kkt_residual)
            gap = max(gap, sol.duality_gap)
        return TrainedModel(spec=spec, n_classes=k, n_features=d, w=W, b=b, alpha=alpha,
                            scaler=scaler, kkt_residual=kkt, duality_gap=gap)

    if spec.kind == "logistic_regression":
        if k == 2:
            y = 2.0 * labels - 1.0
            sol = fit_binary_logistic(X, y, spec.C)
            return TrainedModel(spec=spec, n_classes=k, n_features=d,
                                w=sol.w, b=sol.b, scaler=scaler)
        sol = fit_multinomial_logistic(X, labels, k, spec.C)
        return TrainedModel(spec=spec, n_classes=k, n_features=d,
                            w=sol.W, b=sol.b, scaler=scaler)

    # feed-forward network
    net = make_network(spec, d, k)
    Y = ffn_mod.one_hot(labels, k)
    if spec.optimizer == "adam":
        net.train_adam(X, Y, spec.learning_rate, spec.epochs, spec.batch_size,
                       seed=_subseed(spec.seed, 1))
    else:
        net.train_gd(X, Y, spec.learning_rate, spec.inner_iters, record=False)
    return TrainedModel(spec=spec, n_classes=k, n_features=d, net=net, scaler=scaler)


def make_network(spec: ModelSpec, n_features: int, n_classes: int) -> ffn_mod.Network:
    """Untrained network with the spec's seeded initialization."""
    layers = spec.layers or (n_features, 64, 32, n_classes)
    if layers[0] != n_features:
        raise ConfigError(f"FFN input width {layers[0]} != n_features {n_features}")
    if layers[-1] != n_classes:
        raise ConfigError(f"FFN output width {layers[-1]} != n_classes {n_classes}")
    return ffn_mod.Network(layers=tuple(layers), activation=spec.activation,
                           params=ffn_mod.init_params(tuple(layers), _subseed(spec.seed, 0)))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def decision_function(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Signed margin (binary) or per-class scores (multiclass).

    Binary FFN margins are the logit difference (class 1 minus class 0).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ConfigError(f"feature dimension {X.shape[1]} != model's {model.n_features}")
    Xs = _scale_inputs(model, X)
    if model.net is not None:
        z = model.net.logits(Xs)
        return z[:, 1] - z[:, 0] if model.binary else z
    if model.binary:
        return Xs @ model.w + model.b
    return Xs @ model.w.T + model.b


def predict(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    df = decision_function(model, X)
    if model.binary:
        return (df > 0).astype(np.int64)
    return np.argmax(df, axis=1)


def accuracy(model: TrainedModel, data: Dataset) -> float:
    return float(np.mean(predict(model, data.features) == data.labels))


# ---------------------------------------------------------------------------
# Input-space gradients
# ---------------------------------------------------------------------------

def input_gradients(model: TrainedModel, X: np.ndarray, labels: np.ndarray,
                    objective: str = "loss", target_class: int | None = None) -> np.ndarray:
    """Per-row gradient of the chosen objective with respect to the input.

    objective="loss": the model's own per-sample training loss (hinge sum
    for SVM, logistic/cross-entropy for LR and FFN).
    objective="decision_function": the margin credited to the correct class
    (binary: y * DF, so the gradient is +w for class 1 and -w for class 0;
    multiclass: true-class score minus best other score). With
    ``target_class`` set, the gradient of that class's raw score instead.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    Xs = _scale_inputs(model, X)
    n, d = X.shape
    k = model.n_classes

    if model.net is not None:
        grads = _ffn_input_gradients(model, Xs, labels, objective, target_class)
    elif objective == "loss":
        grads = _linear_loss_gradients(model, Xs, labels)
    else:
        grads = _linear_margin_gradients(model, Xs, labels, target_class)

    if model.scaler is not None:
        grads = grads / model.scaler[1]
    return grads


def input_gradient(model: TrainedModel, x: np.ndarray, y: int,
                   objective: str = "loss", target_class: int | None = None) -> np.ndarray:
    return input_gradients(model, x[None, :], np.array([y]), objective, target_class)[0]


def _linear_loss_gradients(model, Xs, labels):
    n, d = Xs.shape
    if model.spec.kind == "linear_svm":
        if model.binary:
            y = 2.0 * labels - 1.0
            margins = y * (Xs @ model.w + model.b)
            active = (margins < 1.0).astype(np.float64)
            return (-y * active)[:, None] * model.w[None, :]
        grads = np.zeros_like(Xs)
        scores = Xs @ model.w.T + model.b
        for c in range(model.n_classes):
            y_c = np.where(labels == c, 1.0, -1.0)
            active = (y_c * scores[:, c] < 1.0).astype(np.float64)
            grads += (-y_c * active)[:, None] * model.w[c][None, :]
        return grads
    # logistic regression
    if model.binary:
        y = 2.0 * labels - 1.0
        t = (y + 1.0) / 2.0
        sig = sigmoid(Xs @ model.w + model.b)
        return (sig - t)[:, None] * model.w[None, :]
    P = softmax(Xs @ model.w.T + model.b)
    G = P.copy()
    G[np.arange(len(labels)), labels] -= 1.0
    return G @ model.w


def _linear_margin_gradients(model, Xs, labels, target_class):
    n, d = Xs.shape
    if target_class is not None:
        w_t = model.w if model.binary else model.w[target_class]
        sign = (2.0 * target_class - 1.0) if model.binary else 1.0
        return np.tile(sign * w_t, (n, 1)) if model.binary else np.tile(w_t, (n, 1))
    if model.binary:
        y = 2.0 * labels - 1.0
        return y[:, None] * model.w[None, :]
    scores = Xs @ model.w.T + model.b
    scores_masked = scores.copy()
    scores_masked[np.arange(n), labels] = -np.inf
    rival = np.argmax(scores_masked, axis=1)
    return model.w[labels] - model.w[rival]


def _ffn_input_gradients(model, Xs, labels, objective, target_class):
    net = model.net
    k = model.n_classes
    Y = ffn_mod.one_hot(labels, k)
    if objective == "loss":
        return net.input_grads(Xs, Y)
    if target_class is not None:
        delta = np.zeros((Xs.shape[0], k))
        delta[:, target_class] = 1.0
        return _ffn_logit_combination_grad(net, Xs, delta)
    if not model.binary:
        raise ConfigError(
            "decision_function gradients on a multiclass network need a target class")
    y = 2.0 * labels - 1.0
    delta = np.zeros((Xs.shape[0], 2))
    delta[:, 1] = y
    delta[:, 0] = -y
    return _ffn_logit_combination_grad(net, Xs, delta)


def _ffn_logit_combination_grad(net, Xs, delta_out):
    zs, acts = net._forward(Xs)
    _, grads_dX = net._backward(zs, acts, delta_out)
    return grads_dX


# ---------------------------------------------------------------------------
# Enhancement directions
# ---------------------------------------------------------------------------

def enhancement_directions(model: TrainedModel, X: np.ndarray, labels: np.ndarray,
                           objective: str = "loss") -> tuple[np.ndarray, np.ndarray]:
    """Unit directions that push each sample toward being classified
    correctly, plus a mask of rows whose gradient vanished (left as zero).

    For the loss objective the direction is the negative unit loss gradient;
    for the decision-function objective it is the unit gradient of the
    correct-class margin. The two coincide for binary linear models.
    """
    g = input_gradients(model, X, labels, objective)
    if objective == "loss":
        g = -g
    norms = np.linalg.norm(g, axis=1)
    zero = norms <= 1e-12
    safe = np.where(zero, 1.0, norms)
    return g / safe[:, None], zero


# ---------------------------------------------------------------------------
# Serialization: JSON header + little-endian float64 parameter blobs
# ---------------------------------------------------------------------------

_MAGIC = b"EHK1"


def _model_arrays(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    arrays = []
    if model.w is not None:
        arrays.append(("w", np.atleast_1d(np.asarray(model.w, dtype=np.float64))))
        b = np.atleast_1d(np.asarray(model.b, dtype=np.float64))
        arrays.append(("b", b))
    if model.alpha is not None:
        arrays.append(("alpha", np.asarray(model.alpha, dtype=np.float64)))
    if model.net is not None:
        for i, p in enumerate(model.net.params):
            arrays.append((f"net{i}", np.asarray(p, dtype=np.float64)))
    if model.scaler is not None:
        arrays.append(("scaler_mu", model.scaler[0]))
        arrays.append(("scaler_sd", model.scaler[1]))
    return arrays


def save_model(model: TrainedModel, path) -> None:
    arrays = _model_arrays(model)
    header = {
        "version": 1,
        "spec": model.spec.to_dict(),
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "binary_b": model.binary and model.w is not None,
        "kkt_residual": model.kkt_residual,
        "duality_gap": model.duality_gap,
        "net_layers": list(model.net.layers) if model.net is not None else None,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a model file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    spec = ModelSpec.from_dict(header["spec"])
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape)
        arrays[entry["name"]] = a.astype(np.float64)
        offset += size * 8
    model = TrainedModel(spec=spec, n_classes=header["n_classes"],
                         n_features=header["n_features"],
                         kkt_residual=header.get("kkt_residual", 0.0),
                         duality_gap=header.get("duality_gap", 0.0))
    if "w" in arrays:
        w = arrays["w"]
        b = arrays["b"]
        if header["n_classes"] == 2 and header.get("binary_b"):
            model.w, model.b = w.reshape(-1), float(b[0])
        else:
            model.w, model.b = w.reshape(header["n_classes"], -1), b
    if "alpha" in arrays:
        model.alpha = arrays["alpha"]
    if header.get("net_layers"):
        layers = tuple(header["net_layers"])
        params = []
        for i in range(2 * (len(layers) - 1)):
            params.append(arrays[f"net{i}"].copy())
        model.net = ffn_mod.Network(layers=layers, activation=spec.activation, params=params)
    if "scaler_mu" in arrays:
        model.scaler = (arrays["scaler_mu"].copy(), arrays["scaler_sd"].copy())
    return model
