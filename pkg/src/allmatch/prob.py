"""Probability-vector helpers shared by every confidence strategy.

All functions accept a single vector of shape ``(C,)`` or a batch ``(n, C)``
and operate along the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_EPS = 1e-12
DA_EPS = 1e-6


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(target, pred):
    """``-sum_c t_c log p_c`` with ``p`` clamped below at 1e-12."""
    t = np.asarray(target, dtype=np.float64)
    p = np.maximum(np.asarray(pred, dtype=np.float64), LOG_EPS)
    return -np.sum(t * np.log(p), axis=-1)


def entropy(p):
    return cross_entropy(p, p)


def descending_order(p):
    """Class indices sorted by decreasing probability, ties to the lower index."""
    return np.argsort(-np.asarray(p, dtype=np.float64), axis=-1, kind="stable")


def topk_masses(p):
    """Cumulative top-k mass for every k = 1..C (last axis)."""
    p = np.asarray(p, dtype=np.float64)
    return np.cumsum(np.take_along_axis(p, descending_order(p), axis=-1), axis=-1)


def topk_mass(p, k):
    p = np.asarray(p, dtype=np.float64)
    C = p.shape[-1]
    if not 1 <= k <= C:
        raise ValueError(f"k must be in [1, {C}], got {k}")
    return topk_masses(p)[..., k - 1]


def one_hot(labels, num_classes):
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class DaState:
    """Running mean of weak-view predictions, used to align pseudo-labels to a prior."""

    num_classes: int
    momentum: float = 0.999
    running_mean: np.ndarray = field(default=None)
    target: np.ndarray = field(default=None)

    def __post_init__(self):
        uniform = np.full(self.num_classes, 1.0 / self.num_classes)
        if self.running_mean is None:
            self.running_mean = uniform.copy()
        if self.target is None:
            self.target = uniform.copy()

    def update(self, batch_mean):
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * np.asarray(batch_mean, dtype=np.float64)
        return self

    def apply(self, p):
        p = np.asarray(p, dtype=np.float64)
        scaled = p * self.target / np.maximum(self.running_mean, DA_EPS)
        return scaled / scaled.sum(axis=-1, keepdims=True)


def distribution_alignment(da: DaState, p):
    return da.apply(p)


def da_update(da: DaState, batch_mean):
    return da.update(batch_mean)
