"""Model families with hand-derived gradients.

Every family maps a flat :class:`ModelParams` vector to predictions. Layers are
named ``hidden.weight``, ``hidden.bias`` (MLPs only), ``out.weight`` and
``out.bias``; weight matrices are stored row-major as (fan_in, fan_out).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from .datamodel import Example, ModelParams

LINEAR_REGRESSION = "linear_regression"
LINEAR_SVM = "linear_svm"
SOFTMAX = "softmax_classifier"
MLP_CLASSIFIER = "mlp_classifier"
MLP_REGRESSOR = "mlp_regressor"

FAMILIES = (LINEAR_REGRESSION, LINEAR_SVM, SOFTMAX, MLP_CLASSIFIER, MLP_REGRESSOR)
LINEAR_FAMILIES = (LINEAR_REGRESSION, LINEAR_SVM, SOFTMAX)
REGRESSION_FAMILIES = (LINEAR_REGRESSION, MLP_REGRESSOR)


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be nonnegative")
        if self.family in REGRESSION_FAMILIES and self.num_classes != 1:
            raise ValueError(f"{self.family} requires num_classes = 1")
        if self.family == LINEAR_SVM and self.num_classes != 2:
            raise ValueError("linear_svm is binary: num_classes must be 2")
        if self.family in (SOFTMAX, MLP_CLASSIFIER) and self.num_classes < 2:
            raise ValueError(f"{self.family} needs at least 2 classes")
        if self.family in (MLP_CLASSIFIER, MLP_REGRESSOR) and self.hidden_dim < 1:
            raise ValueError("mlp families need hidden_dim >= 1")

    @property
    def is_classifier(self) -> bool:
        return self.family not in REGRESSION_FAMILIES

    @property
    def is_mlp(self) -> bool:
        return self.family in (MLP_CLASSIFIER, MLP_REGRESSOR)

    @property
    def metric_kind(self) -> str:
        return "accuracy" if self.is_classifier else "mse"

    @property
    def out_dim(self) -> int:
        # svm and regressors emit one real score
        return self.num_classes if self.family in (SOFTMAX, MLP_CLASSIFIER) else 1

    def layer_shapes(self) -> list:
        d, h, o = self.input_dim, self.hidden_dim, self.out_dim
        if self.is_mlp:
            return [("hidden.weight", (d, h)), ("hidden.bias", (h,)),
                    ("out.weight", (h, o)), ("out.bias", (o,))]
        return [("out.weight", (d, o)), ("out.bias", (o,))]

    def layer_index(self) -> dict:
        index, start = {}, 0
        for name, shape in self.layer_shapes():
            n = int(np.prod(shape))
            index[name] = slice(start, start + n)
            start += n
        return index

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())


class Prediction(NamedTuple):
    scores: np.ndarray
    probs: np.ndarray


def init_params(arch: ArchDescriptor, seed: int = 0) -> ModelParams:
    """Zeros for linear families; fan-in scaled uniform weights for MLPs."""
    values = np.zeros(arch.num_params)
    index = arch.layer_index()
    if arch.is_mlp:
        rng = np.random.default_rng([int(seed), arch.num_params])
        for name, shape in arch.layer_shapes():
            if name.endswith(".weight"):
                bound = 1.0 / np.sqrt(shape[0])
                values[index[name]] = rng.uniform(-bound, bound, size=int(np.prod(shape)))
    return ModelParams(values, arch, index)


def random_params(arch: ArchDescriptor, seed: int, scale: float = 1.0) -> ModelParams:
    """Gaussian weights of standard deviation ``scale`` for every family (biases zero)."""
    values = np.zeros(arch.num_params)
    index = arch.layer_index()
    rng = np.random.default_rng([int(seed), arch.num_params, 1])
    for name, shape in arch.layer_shapes():
        if name.endswith(".weight"):
            values[index[name]] = scale * rng.standard_normal(int(np.prod(shape)))
    return ModelParams(values, arch, index)


def as_arrays(batch) -> tuple:
    """Accept ``(X, y)`` or a sequence of :class:`Example`; return float X, y arrays."""
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], Example):
        X, y = batch
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return X, np.asarray(y).reshape(-1)
    batch = list(batch)
    if not batch:
        return np.zeros((0, 0)), np.zeros(0)
    X = np.stack([np.asarray(e.features, dtype=np.float64) for e in batch])
    y = np.array([e.label for e in batch])
    return X, y


def _unpack(params: ModelParams) -> dict:
    arch = params.arch
    out = {}
    for name, shape in arch.layer_shapes():
        out[name] = params.values[params.layer_index[name]].reshape(shape)
    return out


def _check_dim(arch: ArchDescriptor, X: np.ndarray) -> None:
    if X.shape[-1] != arch.input_dim:
        raise ValueError(f"expected {arch.input_dim} features, got {X.shape[-1]}")


def _forward(params: ModelParams, X: np.ndarray):
    """Return (raw outputs, hidden activations or None). Raw is (n, out_dim)."""
    arch = params.arch
    _check_dim(arch, X)
    p = _unpack(params)
    if arch.is_mlp:
        H = np.tanh(X @ p["hidden.weight"] + p["hidden.bias"])
        return H @ p["out.weight"] + p["out.bias"], H
    return X @ p["out.weight"] + p["out.bias"], None


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _class_scores(arch: ArchDescriptor, raw: np.ndarray) -> np.ndarray:
    if arch.family == LINEAR_SVM:
        # class-1 score is the margin, class-0 score fixed at zero
        return np.hstack([np.zeros_like(raw), raw])
    return raw


def predict(params: ModelParams, x) -> Union[Prediction, float, np.ndarray]:
    """Scores and probabilities for classifiers, real outputs for regressors.

    A 1-D ``x`` yields a single prediction; a 2-D batch yields stacked ones.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    raw, _ = _forward(params, X)
    if params.arch.is_classifier:
        scores = _class_scores(params.arch, raw)
        probs = _softmax(scores)
        return Prediction(scores[0], probs[0]) if single else Prediction(scores, probs)
    out = raw[:, 0]
    return float(out[0]) if single else out


def predict_output(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Probability matrix (n, C) for classifiers, value vector (n,) for regressors."""
    pred = predict(params, np.atleast_2d(np.asarray(X, dtype=np.float64)))
    return pred.probs if params.arch.is_classifier else pred


def predict_labels(params: ModelParams, X: np.ndarray) -> np.ndarray:
    out = predict_output(params, X)
    return np.argmax(out, axis=1) if params.arch.is_classifier else out


def metric_from_output(output: np.ndarray, y: np.ndarray, kind: str) -> float:
    """Accuracy from probabilities (argmax, ties to lowest class) or mse from values."""
    y = np.asarray(y)
    if kind == "accuracy":
        return float(np.mean(np.argmax(output, axis=1) == y.astype(np.int64)))
    return float(np.mean((np.asarray(output, dtype=np.float64) - y.astype(np.float64)) ** 2))


def metric(params: ModelParams, batch) -> float:
    X, y = as_arrays(batch)
    if len(y) == 0:
        raise ValueError("metric of an empty batch")
    return metric_from_output(predict_output(params, X), y, params.arch.metric_kind)


def _weight_sq(params: ModelParams) -> float:
    return float(sum(np.dot(params.values[s], params.values[s])
                     for name, s in params.layer_index.items() if name.endswith(".weight")))


def per_example_loss(params: ModelParams, batch) -> np.ndarray:
    """Unregularized loss of every example in the batch."""
    X, y = as_arrays(batch)
    raw, _ = _forward(params, X)
    fam = params.arch.family
    if fam in REGRESSION_FAMILIES:
        return (raw[:, 0] - y.astype(np.float64)) ** 2
    if fam == LINEAR_SVM:
        s = 2.0 * y.astype(np.float64) - 1.0
        return np.maximum(0.0, 1.0 - s * raw[:, 0])
    z = raw - raw.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y.astype(np.int64)]


def loss(params: ModelParams, batch) -> float:
    """Mean example loss plus (l2_reg / 2) * squared norm of the weights (biases excluded)."""
    X, y = as_arrays(batch)
    if len(y) == 0:
        raise ValueError("loss of an empty batch")
    value = float(np.mean(per_example_loss(params, (X, y))))
    if params.arch.l2_reg:
        value += 0.5 * params.arch.l2_reg * _weight_sq(params)
    return value


def gradient(params: ModelParams, batch) -> np.ndarray:
    """Analytic gradient of :func:`loss` as a flat vector."""
    X, y = as_arrays(batch)
    n = len(y)
    if n == 0:
        raise ValueError("gradient of an empty batch")
    arch = params.arch
    raw, H = _forward(params, X)
    fam = arch.family
    if fam in REGRESSION_FAMILIES:
        d_raw = (2.0 / n) * (raw - y.astype(np.float64).reshape(-1, 1))
    elif fam == LINEAR_SVM:
        s = 2.0 * y.astype(np.float64) - 1.0
        active = (1.0 - s * raw[:, 0]) > 0.0
        d_raw = np.where(active, -s, 0.0).reshape(-1, 1) / n
    else:
        d_raw = _softmax(raw)
        d_raw[np.arange(n), y.astype(np.int64)] -= 1.0
        d_raw /= n

    p = _unpack(params)
    grads = {}
    inputs = H if arch.is_mlp else X
    grads["out.weight"] = inputs.T @ d_raw
    grads["out.bias"] = d_raw.sum(axis=0)
    if arch.is_mlp:
        d_h = (d_raw @ p["out.weight"].T) * (1.0 - H ** 2)
        grads["hidden.weight"] = X.T @ d_h
        grads["hidden.bias"] = d_h.sum(axis=0)

    flat = np.zeros(arch.num_params)
    for name, s in params.layer_index.items():
        g = grads[name].ravel()
        if arch.l2_reg and name.endswith(".weight"):
            g = g + arch.l2_reg * params.values[s]
        flat[s] = g
    return flat


def representation(params: ModelParams, x) -> np.ndarray:
    """Penultimate features: hidden activations for MLPs, the inputs themselves otherwise."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(params.arch, x)
    if not params.arch.is_mlp:
        return x.copy()
    single = x.ndim == 1
    _, H = _forward(params, x.reshape(1, -1) if single else x)
    return H[0] if single else H


def last_layer_mask(arch: ArchDescriptor) -> np.ndarray:
    mask = np.zeros(arch.num_params, dtype=bool)
    for name, s in arch.layer_index().items():
        if name.startswith("out."):
            mask[s] = True
    return mask
