"""Confidence-handling strategies for the unsupervised loss.

Each strategy is updated once per iteration and then asked for a per-sample
weight in [0, 1]. Threshold strategies only ever return 0 or 1.
"""

from __future__ import annotations

import math

import numpy as np

from .cat import CatState

STRATEGIES = ("fixmatch", "flexmatch", "freematch", "softmatch", "allmatch")


def fixmatch_weight(p_tilde, tau):
    return (np.asarray(p_tilde).max(axis=-1) >= tau).astype(np.float64)


def freematch_weight(p_tilde, tau_t):
    return fixmatch_weight(p_tilde, tau_t)


def flexmatch_thresholds(counts, tau):
    counts = np.asarray(counts, dtype=np.float64)
    top = counts.max()
    if top <= 0.0:
        return np.full(counts.shape, float(tau))
    return tau * counts / top


def softmatch_weight(confidence, mu, sigma, n=2.0):
    """Gaussian tail weight: 1 above ``mu``, ``exp(-(c-mu)^2 / (2 (sigma/n)^2))`` below."""
    c = np.asarray(confidence, dtype=np.float64)
    if sigma <= 0.0:
        return (c >= mu).astype(np.float64)
    gap = np.minimum(c - mu, 0.0)
    return np.exp(-gap**2 / (2.0 * (sigma / n) ** 2))


class Strategy:
    """Interface: ``update`` once per step, then ``weights`` per sample."""

    name = "base"

    def update(self, raw_probs, p_tilde, weight_norms=None):
        pass

    def weights(self, p_tilde):
        raise NotImplementedError

    def selected(self, p_tilde):
        """Samples counted as used (not dropped) for the utilization metrics."""
        return self.weights(p_tilde) > 0.0

    def class_average_threshold(self):
        raise NotImplementedError

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        pass


class FixMatch(Strategy):
    name = "fixmatch"

    def __init__(self, tau=0.95):
        self.tau = tau

    def weights(self, p_tilde):
        return fixmatch_weight(p_tilde, self.tau)

    def class_average_threshold(self):
        return self.tau


class FlexMatch(Strategy):
    """Count-based class thresholds, counts smoothed by EMA instead of per-sample history."""

    name = "flexmatch"

    def __init__(self, num_classes, tau=0.95, momentum=0.999):
        self.tau = tau
        self.momentum = momentum
        self.counts = np.zeros(num_classes)

    def thresholds(self):
        return flexmatch_thresholds(self.counts, self.tau)

    def update(self, raw_probs, p_tilde, weight_norms=None):
        p = np.asarray(p_tilde)
        confident = p.max(axis=1) >= self.tau
        batch = np.bincount(p.argmax(axis=1)[confident], minlength=len(self.counts))
        self.counts = self.momentum * self.counts + (1.0 - self.momentum) * batch

    def weights(self, p_tilde):
        p = np.asarray(p_tilde)
        return (p.max(axis=-1) >= self.thresholds()[p.argmax(axis=-1)]).astype(np.float64)

    def class_average_threshold(self):
        return float(self.thresholds().mean())

    def state_dict(self):
        return {"counts": self.counts.tolist()}

    def load_state_dict(self, state):
        self.counts = np.asarray(state["counts"], dtype=np.float64)


class AllMatch(Strategy):
    """Global EMA threshold scaled per class by EMA classifier weight norms.

    With ``uniform_norms`` the local adjustment is switched off, which makes this
    exactly the global-threshold (FreeMatch-style) rule.
    """

    name = "allmatch"

    def __init__(self, num_classes, momentum=0.999, clamp_range=None, uniform_norms=False):
        self.cat = CatState(num_classes, momentum, clamp_range)
        self.uniform_norms = uniform_norms

    @property
    def tau_global(self):
        return self.cat.tau_global

    def update(self, raw_probs, p_tilde, weight_norms=None):
        self.cat.update_global(raw_probs)
        if self.uniform_norms or weight_norms is None:
            weight_norms = np.ones(self.cat.num_classes)
        self.cat.update_local(weight_norms)

    def weights(self, p_tilde):
        return self.cat.mask(p_tilde)

    def class_average_threshold(self):
        return float(self.cat.class_thresholds.mean())

    def state_dict(self):
        return self.cat.state_dict()

    def load_state_dict(self, state):
        self.cat.load_state_dict(state)


class FreeMatch(AllMatch):
    name = "freematch"

    def __init__(self, num_classes, momentum=0.999, clamp_range=None):
        super().__init__(num_classes, momentum, clamp_range, uniform_norms=True)

    def weights(self, p_tilde):
        return freematch_weight(p_tilde, self.cat.tau_global)


class SoftMatch(Strategy):
    """Gaussian soft weights around an EMA of the batch confidence mean and std."""

    name = "softmatch"
    drop_weight = math.exp(-2.0)

    def __init__(self, num_classes, momentum=0.999, n=2.0):
        self.momentum = momentum
        self.n = n
        self.mu = 1.0 / num_classes
        self.sigma = 1.0

    def update(self, raw_probs, p_tilde, weight_norms=None):
        conf = np.asarray(p_tilde).max(axis=1)
        std = conf.std(ddof=1) if conf.size > 1 else 0.0
        m = self.momentum
        self.mu = m * self.mu + (1.0 - m) * float(conf.mean())
        self.sigma = m * self.sigma + (1.0 - m) * float(std)

    def weights(self, p_tilde):
        return softmatch_weight(np.asarray(p_tilde).max(axis=-1), self.mu, self.sigma, self.n)

    def selected(self, p_tilde):
        # analysis convention: below mu - sigma (weight < e^-2) counts as dropped
        return np.asarray(p_tilde).max(axis=-1) >= self.mu - self.sigma

    def class_average_threshold(self):
        return self.mu - self.sigma

    def state_dict(self):
        return {"mu": self.mu, "sigma": self.sigma}

    def load_state_dict(self, state):
        self.mu = float(state["mu"])
        self.sigma = float(state["sigma"])


def make_strategy(name, num_classes, momentum=0.999, fixmatch_tau=0.95,
                  clamp_range=None, uniform_norms=False, softmatch_n=2.0):
    if name == "fixmatch":
        return FixMatch(fixmatch_tau)
    if name == "flexmatch":
        return FlexMatch(num_classes, fixmatch_tau, momentum)
    if name == "freematch":
        return FreeMatch(num_classes, momentum, clamp_range)
    if name == "softmatch":
        return SoftMatch(num_classes, momentum, softmatch_n)
    if name == "allmatch":
        return AllMatch(num_classes, momentum, clamp_range, uniform_norms)
    raise ValueError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
