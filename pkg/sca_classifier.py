"""
SCA Lab - Target Classifiers

This module provides the differentiable victim models F_theta: a
softmax-linear model and a one-hidden-layer MLP, the softmax cross-entropy
loss, analytic gradients with respect to the input, and a deterministic
full-batch trainer.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax

from sca_chain import read_container, write_container
from sca_models import ClassifierConfig, Sample

logger = logging.getLogger(__name__)

KINDS = ("softmax-linear", "mlp-1-hidden")
ACTIVATIONS = ("tanh", "relu")


class ClassifierError(ValueError):
    """Raised for malformed models, datasets or inputs"""


class TrainingDivergenceError(ClassifierError):
    """Raised when the training loss stops being finite"""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class LabeledDataset:
    """Samples with integer labels in [0, num_classes)"""

    samples: List[Sample]
    labels: List[int]
    num_classes: int

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ClassifierError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if not self.samples:
            raise ClassifierError("dataset is empty")
        shapes = {s.shape for s in self.samples}
        if len(shapes) != 1:
            raise ClassifierError(f"samples disagree on shape: {sorted(shapes)}")
        self.labels = [int(y) for y in self.labels]
        if any(y < 0 or y >= self.num_classes for y in self.labels):
            raise ClassifierError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.samples[0].shape

    def matrix(self) -> np.ndarray:
        return np.stack([s.data for s in self.samples])

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def class_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.label_array(), minlength=self.num_classes)
        return {k: int(c) for k, c in enumerate(counts)}


def _activate(a: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(a) if activation == "tanh" else np.maximum(a, 0.0)


def _activation_slope(a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return 1.0 - np.tanh(a) ** 2
    return (a > 0).astype(np.float64)


@dataclass(frozen=True)
class Classifier:
    """Trained target model; parameters are read-only after construction"""

    kind: str
    params: Dict[str, np.ndarray]
    input_shape: Tuple[int, int, int]
    num_classes: int
    activation: str = "tanh"
    train_accuracy: Optional[float] = None
    metadata: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ClassifierError(f"unknown classifier kind '{self.kind}', expected one of {KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ClassifierError(f"unknown activation '{self.activation}'")
        d = int(np.prod(self.input_shape))
        K = self.num_classes
        names = ("W", "b") if self.kind == "softmax-linear" else ("W1", "b1", "W2", "b2")
        if set(self.params) != set(names):
            raise ClassifierError(f"{self.kind} expects parameters {names}, got {sorted(self.params)}")
        params = {k: np.array(self.params[k], dtype=np.float64) for k in names}
        if self.kind == "softmax-linear":
            expected = {"W": (K, d), "b": (K,)}
        else:
            H = params["W1"].shape[0]
            expected = {"W1": (H, d), "b1": (H,), "W2": (K, H), "b2": (K,)}
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ClassifierError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name])):
                raise ClassifierError(f"parameter {name} is not finite")
            params[name].setflags(write=False)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def hidden(self) -> Optional[int]:
        return self.params["W1"].shape[0] if self.kind == "mlp-1-hidden" else None

    def logits_batch(self, X: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "softmax-linear":
            return X @ p["W"].T + p["b"]
        hidden = _activate(X @ p["W1"].T + p["b1"], self.activation)
        return hidden @ p["W2"].T + p["b2"]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits_batch(X), axis=1)

    def check_input(self, x: Sample):
        if x.shape != self.input_shape:
            raise ClassifierError(f"input shape {x.shape} does not match classifier input {self.input_shape}")

    def check_label(self, y: int):
        if not 0 <= int(y) < self.num_classes:
            raise ClassifierError(f"label {y} outside [0, {self.num_classes})")


def forward_loss(model: Classifier, x: Sample, y: int) -> Tuple[float, np.ndarray, int]:
    """
    Softmax cross-entropy of a single input

    Args:
        model: classifier
        x: input sample
        y: true label

    Returns:
        (loss, logits, predicted label); ties go to the lowest index
    """
    model.check_input(x)
    model.check_label(y)
    logits = model.logits_batch(x.data[None, :])[0]
    loss = float(logsumexp(logits) - logits[int(y)])
    return loss, logits, int(np.argmax(logits))


def input_gradient(model: Classifier, x: Sample, y: int) -> Sample:
    """Analytic d(cross-entropy)/dx"""
    model.check_input(x)
    model.check_label(y)
    p = model.params
    if model.kind == "softmax-linear":
        residual = softmax(p["W"] @ x.data + p["b"])
        residual[int(y)] -= 1.0
        return x.with_data(p["W"].T @ residual)
    pre = p["W1"] @ x.data + p["b1"]
    residual = softmax(p["W2"] @ _activate(pre, model.activation) + p["b2"])
    residual[int(y)] -= 1.0
    back = (p["W2"].T @ residual) * _activation_slope(pre, model.activation)
    return x.with_data(p["W1"].T @ back)


def init_classifier(
    kind: str,
    input_shape: Tuple[int, int, int],
    num_classes: int,
    hidden: int = 16,
    activation: str = "tanh",
    rng_seed: int = 0,
) -> Classifier:
    """Seeded initial parameters (small Gaussian weights, zero biases)"""
    d = int(np.prod(input_shape))
    rng = np.random.default_rng(rng_seed)
    if kind == "softmax-linear":
        params = {"W": 0.01 * rng.standard_normal((num_classes, d)), "b": np.zeros(num_classes)}
    elif kind == "mlp-1-hidden":
        params = {
            "W1": rng.standard_normal((hidden, d)) / np.sqrt(d),
            "b1": np.zeros(hidden),
            "W2": rng.standard_normal((num_classes, hidden)) / np.sqrt(hidden),
            "b2": np.zeros(num_classes),
        }
    else:
        raise ClassifierError(f"unknown classifier kind '{kind}', expected one of {KINDS}")
    return Classifier(kind, params, input_shape, num_classes, activation)


def _batch_loss_and_grads(model: Classifier, X: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    p = model.params
    n = X.shape[0]
    if model.kind == "softmax-linear":
        logits = X @ p["W"].T + p["b"]
    else:
        pre = X @ p["W1"].T + p["b1"]
        hidden = _activate(pre, model.activation)
        logits = hidden @ p["W2"].T + p["b2"]
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[np.arange(n), y]))
    G = softmax(logits, axis=1)
    G[np.arange(n), y] -= 1.0
    G /= n
    if model.kind == "softmax-linear":
        return loss, {"W": G.T @ X, "b": G.sum(axis=0)}
    back = (G @ p["W2"]) * _activation_slope(pre, model.activation)
    return loss, {
        "W1": back.T @ X,
        "b1": back.sum(axis=0),
        "W2": G.T @ hidden,
        "b2": G.sum(axis=0),
    }


def train_classifier(
    data: LabeledDataset,
    kind: str = "softmax-linear",
    epochs: int = 300,
    lr: float = 0.5,
    rng_seed: int = 0,
    hidden: int = 16,
    activation: str = "tanh",
) -> Classifier:
    """
    Full-batch gradient descent on mean cross-entropy

    Args:
        data: training set with at least two classes
        kind: 'softmax-linear' or 'mlp-1-hidden'
        epochs: number of full-batch steps
        lr: learning rate
        rng_seed: initialisation seed
        hidden: hidden width for the mlp
        activation: hidden activation for the mlp

    Returns:
        Classifier with train_accuracy recorded
    """
    if data.num_classes < 2:
        raise ClassifierError("training needs at least two classes")
    if epochs < 1 or lr < 0:
        raise ClassifierError(f"epochs must be >= 1 and lr >= 0, got {epochs}, {lr}")

    model = init_classifier(kind, data.shape, data.num_classes, hidden, activation, rng_seed)
    X = data.matrix()
    y = data.label_array()
    params = {k: v.copy() for k, v in model.params.items()}
    loss = float("nan")
    for epoch in range(epochs):
        current = Classifier(kind, params, data.shape, data.num_classes, activation)
        loss, grads = _batch_loss_and_grads(current, X, y)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(epoch, loss)
        params = {k: params[k] - lr * grads[k] for k in params}
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDivergenceError(epoch, loss)

    trained = Classifier(kind, params, data.shape, data.num_classes, activation)
    accuracy = float(np.mean(trained.predict_batch(X) == y))
    logger.info(f"Trained {kind} classifier: epochs={epochs} final_loss={loss:.6g} train_accuracy={accuracy:.4f}")
    return Classifier(
        kind, params, data.shape, data.num_classes, activation,
        train_accuracy=accuracy, metadata={"final_loss": loss, "epochs": float(epochs)},
    )


def classifier_from_config(data: LabeledDataset, config: ClassifierConfig) -> Classifier:
    return train_classifier(
        data,
        kind=config.kind,
        epochs=config.epochs,
        lr=config.lr,
        rng_seed=config.rng_seed,
        hidden=config.hidden,
        activation=config.activation,
    )


def accuracy(model: Classifier, data: LabeledDataset) -> float:
    return float(np.mean(model.predict_batch(data.matrix()) == data.label_array()))


def save_classifier(model: Classifier, path: Union[str, Path]):
    header = {
        "kind": "classifier",
        "model_kind": model.kind,
        "shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "activation": model.activation,
        "train_accuracy": model.train_accuracy,
    }
    write_container(path, dict(model.params), header)


def load_classifier(path: Union[str, Path]) -> Classifier:
    header, arrays = read_container(path)
    if header.get("kind") != "classifier":
        raise ClassifierError(f"{path}: container does not hold classifier parameters")
    return Classifier(
        header["model_kind"],
        arrays,
        tuple(header["shape"]),
        int(header["num_classes"]),
        header["activation"],
        train_accuracy=header.get("train_accuracy"),
    )
