"""Sklearn-style facade over the train/ensemble pipeline.

RSEClassifier follows the estimator protocol (fit/predict/predict_proba,
get_params/set_params) so it drops into sklearn model-selection utilities.
It wraps arrays shaped (N, C, H, W); flat (N, features) input is accepted
when a square image shape can be inferred.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .defense import EnsembleConfig, TrainConfig, desk_config, train
from .errors import UsageError
from .layers import build_model
from .rng import RngStream


class RSEClassifier:
    """Noise-layer convnet with ensemble-over-noise inference."""

    def __init__(self, sigma_init: float = 0.2, sigma_inner: float = 0.1,
                 epochs: int = 10, batch_size: int = 50, lr: float = 0.01,
                 momentum: float = 0.9, ensemble_n: int = 10,
                 random_state: int = 0):
        self.sigma_init = sigma_init
        self.sigma_inner = sigma_inner
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.ensemble_n = ensemble_n
        self.random_state = random_state

    # -- estimator protocol -------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in (
            "sigma_init", "sigma_inner", "epochs", "batch_size", "lr",
            "momentum", "ensemble_n", "random_state")}

    def set_params(self, **params):
        valid = self.get_params()
        for k, v in params.items():
            if k not in valid:
                raise UsageError(f"invalid parameter '{k}' for RSEClassifier")
            setattr(self, k, v)
        return self

    # -- fitting -------------------------------------------------------------

    def _as_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 4:
            return X
        if X.ndim == 2:
            side = int(round(np.sqrt(X.shape[1] / 3)))
            if 3 * side * side != X.shape[1]:
                raise UsageError(f"cannot reshape {X.shape[1]} features into "
                                 f"a 3-channel square image")
            return X.reshape(X.shape[0], 3, side, side)
        raise UsageError(f"expected (N,C,H,W) or (N,features), got ndim={X.ndim}")

    def fit(self, X, y):
        images = self._as_images(X)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        labels = np.searchsorted(self.classes_, y)
        data = Dataset(images=images, labels=labels,
                       classes=len(self.classes_), split="train",
                       provenance="estimator")
        noisy = self.sigma_init > 0 or self.sigma_inner > 0
        cfg = desk_config(images.shape[1:], len(self.classes_),
                          self.sigma_init if noisy else 0.0,
                          self.sigma_inner if noisy else 0.0)
        model = build_model(cfg, RngStream(self.random_state))
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                         lr=self.lr, momentum=self.momentum,
                         seed=self.random_state,
                         defense="rse" if noisy else "none",
                         sigma_init=self.sigma_init,
                         sigma_inner=self.sigma_inner)
        self.model_, self.loss_trace_ = train(model, data, tc)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise UsageError("RSEClassifier is not fitted; call fit() first")

    def predict_proba(self, X) -> np.ndarray:
        from .defense import ensemble_probs

        self._check_fitted()
        return ensemble_probs(self.model_, self._as_images(X),
                              EnsembleConfig(n=self.ensemble_n,
                                             seed=self.random_state))

    def predict(self, X) -> np.ndarray:
        probs = np.atleast_2d(self.predict_proba(X))
        return self.classes_[np.argmax(probs, axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
