"""scikit-learn style wrapper around the window CNN."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import ChannelStandardizer
from .nn import NetworkSpec, build_network
from .training import TrainConfig, train


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Window classifier: per-channel z-scoring followed by the 9-layer CNN.

    ``X`` holds windows as (n, length, channels), the layout of
    ``WindowSet.data``. Labels are integers in ``0..n_classes-1``.
    """

    def __init__(self, lr=0.001, n_minibatches=50, epochs=20, lr_step_size=19, lr_gamma=0.1,
                 weight_decay=0.1, decay_all_params=True, dropout=0.5, n_classes=6,
                 standardize=True, dtype="float32", random_state=0):
        self.lr = lr
        self.n_minibatches = n_minibatches
        self.epochs = epochs
        self.lr_step_size = lr_step_size
        self.lr_gamma = lr_gamma
        self.weight_decay = weight_decay
        self.decay_all_params = decay_all_params
        self.dropout = dropout
        self.n_classes = n_classes
        self.standardize = standardize
        self.dtype = dtype
        self.random_state = random_state

    def _seeds(self):
        # independent streams for weight init and mini-batch/dropout draws
        init, batches = np.random.SeedSequence(self.random_state).generate_state(2)
        return int(init), int(batches)

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=(np.float32, np.float64), ensure_min_samples=1)
        if X.ndim != 3:
            raise ValueError(f"expected windows of shape (n, length, channels), got {X.shape}")
        return X

    def train_config(self):
        return TrainConfig(lr=self.lr, n_minibatches=self.n_minibatches, epochs=self.epochs,
                           lr_step_size=self.lr_step_size, lr_gamma=self.lr_gamma,
                           weight_decay=self.weight_decay, decay_all_params=self.decay_all_params,
                           seed=self._seeds()[1], dtype=self.dtype)

    def fit(self, X, y, eval_set=None):
        """Train from scratch. ``eval_set=(X_val, y_val)`` fills the learning curve."""
        X = self._check_X(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError(f"y must have {X.shape[0]} entries, got shape {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        self.classes_ = np.arange(self.n_classes)
        self.standardizer_ = ChannelStandardizer().fit(X) if self.standardize else None
        spec = NetworkSpec(in_channels=X.shape[2], window_length=X.shape[1], n_classes=self.n_classes,
                           dropout=self.dropout)
        net = build_network(spec, seed=self._seeds()[0], dtype=np.dtype(self.dtype))
        xv = yv = None
        if eval_set is not None:
            xv = self._network_input(self._check_X(eval_set[0]))
            yv = np.asarray(eval_set[1])
        self.network_, self.learning_curve_ = train(
            net, self._network_input(X), y, xv, yv, self.train_config())
        self.n_features_in_ = X.shape[2]
        return self

    def _network_input(self, X):
        if getattr(self, "standardizer_", None) is not None:
            X = self.standardizer_.transform(X)
        return np.ascontiguousarray(X.transpose(0, 2, 1), dtype=self.dtype)

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        return self.network_.predict_proba(self._network_input(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
