"""Class-specific adaptive threshold.

A global threshold tracks the EMA of batch mean confidence; each class then
gets that threshold scaled by its classifier weight norm relative to the
largest norm. Only O(C) numbers are kept, never anything per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CatState:
    num_classes: int
    momentum: float = 0.999
    clamp_range: tuple[float, float] | None = None
    tau_global: float = field(default=None)
    class_thresholds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.clamp_range is not None:
            lo, hi = (float(v) for v in self.clamp_range)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"clamp_range must satisfy 0 <= lo <= hi <= 1, got {self.clamp_range}")
            self.clamp_range = (lo, hi)
        if self.tau_global is None:
            self.tau_global = self._clamp(1.0 / self.num_classes)
        if self.class_thresholds is None:
            self.class_thresholds = np.full(self.num_classes, self.tau_global)

    def _clamp(self, tau):
        if self.clamp_range is None:
            return tau
        lo, hi = self.clamp_range
        return min(max(tau, lo), hi)

    def update_global(self, weak_probs):
        """EMA step on the mean max-probability of a batch of raw weak predictions."""
        p = np.atleast_2d(np.asarray(weak_probs, dtype=np.float64))
        if p.shape[0] == 0:
            raise ValueError("update_global needs at least one prediction")
        mean_conf = float(p.max(axis=1).mean())
        m = self.momentum
        self.tau_global = self._clamp(m * self.tau_global + (1.0 - m) * mean_conf)
        return self

    def update_local(self, weight_norms):
        norms = np.asarray(weight_norms, dtype=np.float64)
        top = norms.max()
        if top > 0.0:
            self.class_thresholds = self.tau_global * (norms / top)
        else:
            self.class_thresholds = np.full(self.num_classes, self.tau_global)
        return self

    def mask(self, p_tilde):
        """1.0 where ``max(p) >= threshold[argmax(p)]``, else 0.0."""
        p = np.asarray(p_tilde, dtype=np.float64)
        conf = p.max(axis=-1)
        cls = p.argmax(axis=-1)
        return (conf >= self.class_thresholds[cls]).astype(np.float64)

    def state_dict(self):
        return {
            "tau_global": self.tau_global,
            "momentum": self.momentum,
            "clamp_range": None if self.clamp_range is None else list(self.clamp_range),
            "class_thresholds": self.class_thresholds.tolist(),
        }

    def load_state_dict(self, state):
        self.tau_global = float(state["tau_global"])
        self.momentum = float(state["momentum"])
        cr = state["clamp_range"]
        self.clamp_range = None if cr is None else tuple(cr)
        self.class_thresholds = np.asarray(state["class_thresholds"], dtype=np.float64)
