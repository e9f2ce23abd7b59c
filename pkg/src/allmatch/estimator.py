"""scikit-learn front end for the semi-supervised trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nn
from .config import TrainConfig
from .data import SslDataset
from .harness import Trainer
from .prob import softmax

UNLABELED = -1


class AllMatchClassifier(ClassifierMixin, BaseEstimator):
    """Semi-supervised MLP classifier trained with a pluggable confidence strategy.

    Follows the scikit-learn semi-supervised convention: rows of ``y`` equal to
    ``-1`` are unlabeled. Prediction uses the EMA copy of the weights.

    Parameters
    ----------
    strategy : {"allmatch", "fixmatch", "flexmatch", "freematch", "softmatch"}
    lambda_u, lambda_b : float
        Weights of the pseudo-label loss and the candidate/negative consistency loss.
    max_iter : int
        Number of SGD iterations.
    batch_labeled, batch_unlabeled : int
    hidden_dims : tuple of int
    learning_rate : float
        Initial rate of the cosine-decayed SGD schedule.
    threshold_momentum : float
        EMA momentum for thresholds, top-k confidences and distribution alignment.
    cap_k : int
        Upper bound on the candidate-set size (clipped to the number of classes).
    clamp_range : (float, float) or None
    weak_sigma, strong_sigma, dropout : float
        Noise augmentations for the two unlabeled views.
    random_state : int
    """

    def __init__(self, strategy="allmatch", lambda_u=1.0, lambda_b=1.0, max_iter=2000,
                 batch_labeled=16, batch_unlabeled=64, hidden_dims=(64, 64),
                 learning_rate=0.03, weight_decay=5e-4, threshold_momentum=0.999,
                 ema_decay=0.999, cap_k=10, clamp_range=None, weak_sigma=0.1,
                 strong_sigma=0.6, dropout=0.0, random_state=0):
        self.strategy = strategy
        self.lambda_u = lambda_u
        self.lambda_b = lambda_b
        self.max_iter = max_iter
        self.batch_labeled = batch_labeled
        self.batch_unlabeled = batch_unlabeled
        self.hidden_dims = hidden_dims
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.threshold_momentum = threshold_momentum
        self.ema_decay = ema_decay
        self.cap_k = cap_k
        self.clamp_range = clamp_range
        self.weak_sigma = weak_sigma
        self.strong_sigma = strong_sigma
        self.dropout = dropout
        self.random_state = random_state

    def _config(self):
        return TrainConfig.from_dict({
            "strategy": self.strategy,
            "lambda_u": float(self.lambda_u),
            "lambda_b": float(self.lambda_b),
            "total_iterations": int(self.max_iter),
            "batch_labeled": int(self.batch_labeled),
            "batch_unlabeled": int(self.batch_unlabeled),
            "momentum": float(self.threshold_momentum),
            "cap_k": int(self.cap_k),
            "clamp_range": None if self.clamp_range is None else list(self.clamp_range),
            "model": {"hidden_dims": list(self.hidden_dims)},
            "optim": {"lr": float(self.learning_rate), "weight_decay": float(self.weight_decay),
                      "ema_decay": float(self.ema_decay)},
            "augment": {"weak_sigma": float(self.weak_sigma), "strong_sigma": float(self.strong_sigma),
                        "dropout": float(self.dropout)},
        })

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        labeled = y != UNLABELED
        if not labeled.any():
            raise ValueError("need at least one labeled sample (y != -1)")
        self.classes_, encoded = np.unique(y[labeled], return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes among labeled samples")
        self.n_features_in_ = X.shape[1]
        C = len(self.classes_)
        ux = X[~labeled]
        dataset = SslDataset(X[labeled], encoded.astype(np.int64), ux,
                             np.full(len(ux), -1, dtype=np.int64),
                             np.empty((0, X.shape[1])), np.empty(0, dtype=np.int64), C)
        trainer = Trainer(self._config(), self.random_state, dataset=dataset)
        for _ in range(self.max_iter):
            trainer.train_step()
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.ema_params_ = {k: v.copy() for k, v in trainer.ema.shadow.items()}
        self.n_iter_ = trainer.iteration
        return self

    def decision_function(self, X):
        check_is_fitted(self, "ema_params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nn.forward(self.model_, X, keep_cache=False, params=self.ema_params_)[1]

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
