"""enhkit: gradient-based data-enhancement attacks on classifiers.

Tools for studying how a dataset can be manipulated so that classifiers
evaluated on it report falsely inflated performance, together with the
from-scratch solvers (linear SVM, logistic regression, feed-forward net),
training-point influence gradients, and the reproducible evaluation
harness needed to measure the effect.
"""

from .data import (
    Dataset,
    FeatureMask,
    FoldPlan,
    feature_similarity,
    generate_shifted_pair,
    generate_synthetic,
    kfold,
    load_dataset,
    load_tabular,
    save_dataset,
    select_features,
)
from .errors import ConfigError, EnhkitError, NumericalError
from .models import (
    ModelSpec,
    TrainedModel,
    decision_function,
    fit,
    input_gradient,
    input_gradients,
    load_model,
    predict,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Dataset", "EnhkitError", "FeatureMask", "FoldPlan",
    "ModelSpec", "NumericalError", "TrainedModel", "decision_function",
    "feature_similarity", "fit", "generate_shifted_pair", "generate_synthetic",
    "input_gradient", "input_gradients", "kfold", "load_dataset", "load_model",
    "load_tabular", "predict", "save_dataset", "save_model", "select_features",
]
