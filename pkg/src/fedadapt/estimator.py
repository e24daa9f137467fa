"""scikit-learn style wrapper around the block-chain learner."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .adaptation import DEFAULT_LR, AdaptMode, SamplingPolicy, SparseExact, UpdateHistogram, adapt_step
from .model import ModelSpec, init_weights
from .streams import Frame


class BlockChainRegressor(RegressorMixin, BaseEstimator):
    """Online regressor whose prediction is the last block's head.

    ``fit`` trains from scratch with FULL steps over ``n_epochs`` shuffled
    passes. ``partial_fit`` continues with one online step per row in the
    given order, using ``mode`` ("full" or "mad").
    """

    def __init__(self, num_blocks=5, hidden_dim=16, lr=DEFAULT_LR, n_epochs=1, mode="full",
                 sampling="count_softmax", random_state=0):
        self.num_blocks = num_blocks
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.n_epochs = n_epochs
        self.mode = mode
        self.sampling = sampling
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        # one small-step pass over a tiny dataset does not reach R^2 > 0.5
        tags.regressor_tags.poor_score = True
        return tags

    def _validate_hyperparams(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.n_epochs < 1:
            raise ValueError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if AdaptMode(self.mode) is AdaptMode.NONE:
            raise ValueError("mode 'none' never trains; use predict on a fitted model instead")
        SamplingPolicy(self.sampling)

    def _init(self, n_features):
        spec = ModelSpec(self.num_blocks, n_features, self.hidden_dim,
                         seed=int(self.random_state or 0))
        self.weights_ = init_weights(spec)
        self.histogram_ = UpdateHistogram.zeros(self.num_blocks)
        self.n_features_in_ = n_features
        self._rng = np.random.default_rng(self.random_state)
        self.n_updates_ = 0

    def _steps(self, X, y, mode):
        w, H = self.weights_, self.histogram_
        policy = SamplingPolicy(self.sampling)
        for k in range(X.shape[0]):
            frame = Frame(k, X[k], float(y[k]), "fit", 0.0, 1.0)
            w, H, _ = adapt_step(w, frame, mode, SparseExact(1.0), self.lr, H, policy, self._rng)
        self.weights_, self.histogram_ = w, H
        self.n_updates_ += X.shape[0]

    def fit(self, X, y):
        self._validate_hyperparams()
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True)
        self._init(X.shape[1])
        for _ in range(self.n_epochs):
            order = self._rng.permutation(X.shape[0])
            self._steps(X[order], y[order], AdaptMode.FULL)
        return self

    def partial_fit(self, X, y):
        self._validate_hyperparams()
        first = not hasattr(self, "weights_")
        X, y = validate_data(self, X, y, dtype=np.float64, y_numeric=True, reset=first)
        if first:
            self._init(X.shape[1])
        self._steps(X, y, AdaptMode(self.mode))
        return self

    def predict_blocks(self, X) -> np.ndarray:
        """Every block's head output, shape ``(n_samples, num_blocks)``."""
        check_is_fitted(self, "weights_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        H = X
        out = np.empty((X.shape[0], self.weights_.spec.num_blocks))
        for i in range(self.weights_.spec.num_blocks):
            W, b, v, c = self.weights_.unpack64(i)
            H = np.tanh(H @ W.T + b)
            out[:, i] = H @ v + c
        return out

    def predict(self, X) -> np.ndarray:
        return self.predict_blocks(X)[:, -1]
