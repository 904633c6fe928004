"""Small featurizer + linear classifier with manual backprop.

Predictors decompose as f = w . phi: a featurizer phi mapping the
concatenated (x1, x2) input to a feature space of dimension h, and a
linear head over that space. Used by the feature-augmented trainer;
everything is plain numpy with analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TwoBitDataset


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


@dataclass
class Featurizer:
    """Stack of affine layers with a hidden activation."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"  # 'relu' or 'identity'

    def __post_init__(self) -> None:
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation: {self.activation}")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError("layer weight/bias dimension mismatch")

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "Featurizer":
        return Featurizer(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns features and the cached pre/post activations."""
        cache = [x]
        h = x
        for w, b in zip(self.weights, self.biases):
            z = h @ w.T + b
            h = relu(z) if self.activation == "relu" else z
            cache.append(z)
            cache.append(h)
        return h, cache

    def backward(
        self, cache: list[np.ndarray], d_out: np.ndarray
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of a scalar objective given d(objective)/d(features)."""
        gw = [np.zeros_like(w) for w in self.weights]
        gb = [np.zeros_like(b) for b in self.biases]
        grad = d_out
        for li in reversed(range(len(self.weights))):
            z = cache[1 + 2 * li]
            h_in = cache[2 * li]
            if self.activation == "relu":
                grad = grad * (z > 0)
            gw[li] = grad.T @ h_in
            gb[li] = grad.sum(axis=0)
            if li > 0:
                grad = grad @ self.weights[li]
        return gw, gb

    def zero_grads(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]


@dataclass
class Classifier:
    """Linear head over the feature space."""

    w: np.ndarray
    b: float = 0.0

    def copy(self) -> "Classifier":
        return Classifier(self.w.copy(), self.b)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.w + self.b


@dataclass
class MlpParams:
    """A full predictor: featurizer plus classifier head."""

    featurizer: Featurizer
    classifier: Classifier

    def logits(self, x: np.ndarray) -> np.ndarray:
        features, _ = self.featurizer.forward(x)
        return self.classifier.logits(features)


def init_featurizer(
    in_dim: int, hidden: int = 32, activation: str = "relu", seed: int = 0
) -> Featurizer:
    rng = np.random.Generator(np.random.Philox(seed))
    w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(hidden, in_dim))
    b = np.zeros(hidden)
    return Featurizer([w], [b], activation)


def init_classifier(hidden: int, seed: int = 0) -> Classifier:
    rng = np.random.Generator(np.random.Philox(seed))
    return Classifier(rng.normal(0.0, 0.1 / np.sqrt(hidden), size=hidden), 0.0)


def dataset_inputs(ds: TwoBitDataset) -> np.ndarray:
    """Concatenate the two patches into one input matrix (n, 2d)."""
    return np.concatenate([ds.x1, ds.x2], axis=1)
