"""Binary logistic regression trained with weighted mini-batch SGD."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import derive_rng
from ._validation import check_binary, check_sample_weight

PROBA_CLIP = 1e-12
# local epochs per round; calibrated on Adult, where one epoch leaves lr=1e-3 undertrained
DEFAULT_EPOCHS = 5


class TrainingDivergedError(FloatingPointError):
    """Parameters became non-finite during local training."""

    def __init__(self, message, *, epoch=None, round=None, client=None):
        super().__init__(message)
        self.epoch = epoch
        self.round = round
        self.client = client


@dataclass
class ModelParams:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = float(self.bias)
        if self.weights.ndim != 1:
            raise ValueError("weights must be a vector")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")

    @classmethod
    def zeros(cls, n_features: int) -> "ModelParams":
        return cls(np.zeros(n_features), 0.0)

    @classmethod
    def from_vector(cls, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(vec[:-1].copy(), float(vec[-1]))

    def to_vector(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def _scores(theta: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != theta.n_features:
        raise ValueError(f"expected {theta.n_features} features, got {X.shape[-1]}")
    return X @ theta.weights + theta.bias


def predict_proba(theta: ModelParams, X):
    """Sigmoid of the affine score; a scalar for a single row."""
    return expit(_scores(theta, X))


def predict(theta: ModelParams, X):
    # a probability of exactly 0.5 predicts the positive class
    out = (predict_proba(theta, X) >= 0.5).astype(np.int64)
    return out if np.ndim(out) else int(out)


def _row_losses(theta, X, y) -> np.ndarray:
    p = np.clip(predict_proba(theta, X), PROBA_CLIP, 1 - PROBA_CLIP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def loss(theta: ModelParams, X, y, sample_weight=None) -> float:
    """Weighted mean binary cross-entropy."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    w = check_sample_weight(sample_weight, X.shape[0])
    return float(np.dot(w, _row_losses(theta, X, y)) / w.sum())


def gradient(theta: ModelParams, X, y, sample_weight=None) -> ModelParams:
    """Gradient of :func:`loss` with respect to weights and bias."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    w = check_sample_weight(sample_weight, X.shape[0])
    g = w * (predict_proba(theta, X) - y) / w.sum()
    return ModelParams(X.T @ g, g.sum())


def local_train(theta_init: ModelParams, X, y, sample_weight, cfg: TrainConfig) -> ModelParams:
    """Run ``cfg.epochs`` epochs of mini-batch SGD from ``theta_init``.

    Sample weights are rescaled to mean 1, so equal weights of any value
    give exactly the unweighted trajectory. Shuffling is driven by
    ``cfg.seed`` alone.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("local_train needs at least one row")
    w = check_sample_weight(sample_weight, n)
    w = np.ones(n) if np.all(w == w[0]) else w / w.mean()

    coef = theta_init.weights.copy()
    bias = theta_init.bias
    lr = cfg.learning_rate
    bs = cfg.batch_size
    rng = derive_rng(cfg.seed, "sgd")
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        Xp, yp, wp = X[perm], y[perm], w[perm]
        with np.errstate(over="ignore", invalid="ignore"):  # checked after the epoch
            for lo in range(0, n, bs):
                xb = Xp[lo:lo + bs]
                g = wp[lo:lo + bs] * (expit(xb @ coef + bias) - yp[lo:lo + bs])
                m = g.shape[0]
                coef -= lr * (xb.T @ g) / m
                bias -= lr * g.sum() / m
        if not (np.all(np.isfinite(coef)) and np.isfinite(bias)):
            raise TrainingDivergedError(
                f"non-finite parameters after epoch {epoch}", epoch=epoch
            )
    return ModelParams(coef, bias)


class SGDLogisticRegression(ClassifierMixin, BaseEstimator):
    """Scikit-learn facade over :func:`local_train` for centralized use.

    Parameters
    ----------
    learning_rate : float, default=0.01
    epochs : int, default=5
    batch_size : int, default=64
    random_state : int, default=0
    warm_start : bool, default=False
        Continue from the current parameters on repeated ``fit`` calls.
    """

    def __init__(self, learning_rate=0.01, epochs=DEFAULT_EPOCHS, batch_size=64, random_state=0,
                 warm_start=False):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=np.float64)
        y = check_binary(y, "y")
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different row counts")
        init = self.params_ if self.warm_start and hasattr(self, "params_") \
            else ModelParams.zeros(X.shape[1])
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.random_state)
        self.params_ = local_train(init, X, y, sample_weight, cfg)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def coef_(self):
        check_is_fitted(self, "params_")
        return self.params_.weights[None, :]

    @property
    def intercept_(self):
        check_is_fitted(self, "params_")
        return np.array([self.params_.bias])

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        p = predict_proba(self.params_, check_array(X, dtype=np.float64))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict(self.params_, check_array(X, dtype=np.float64))

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return _scores(self.params_, check_array(X, dtype=np.float64))
