"""Binary classification consistency.

Every unlabeled sample is split into a candidate set (its top-k classes under
the weak view) and the remaining negative classes. The strong view is then
trained to put the same candidate/negative mass split, so even samples that
fail the confidence threshold contribute a signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .prob import LOG_EPS, descending_order, topk_masses


@dataclass
class BccState:
    """Global top-k confidences ``mu[k-1]`` for k = 1..C, plus the cap K."""

    num_classes: int
    cap: int = 10
    momentum: float = 0.999
    mu: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 1 <= self.cap <= self.num_classes:
            raise ValueError(f"cap K must be in [1, {self.num_classes}], got {self.cap}")
        if self.mu is None:
            self.mu = np.arange(1, self.num_classes + 1) / self.num_classes

    def update_mu(self, p_tilde):
        p = np.atleast_2d(np.asarray(p_tilde, dtype=np.float64))
        if p.shape[0] == 0:
            raise ValueError("update_mu needs at least one prediction")
        m = self.momentum
        self.mu = m * self.mu + (1.0 - m) * topk_masses(p).mean(axis=0)
        return self

    def select_k(self, p_tilde, confident):
        """Smallest k whose top-k mass reaches ``mu[k-1]``, capped at K; 1 when confident."""
        p = np.atleast_2d(np.asarray(p_tilde, dtype=np.float64))
        reached = topk_masses(p) >= self.mu
        first = np.where(reached.any(axis=1), reached.argmax(axis=1) + 1, self.cap)
        k = np.minimum(first, self.cap)
        k = np.where(np.atleast_1d(confident).astype(bool), 1, k)
        return k.astype(np.int64)

    def state_dict(self):
        return {"mu": self.mu.tolist(), "momentum": self.momentum, "cap": self.cap}

    def load_state_dict(self, state):
        self.mu = np.asarray(state["mu"], dtype=np.float64)
        self.momentum = float(state["momentum"])
        self.cap = int(state["cap"])


@dataclass
class BinaryDivision:
    """Candidate/negative split of one batch.

    ``weak`` and ``strong`` are ``(n, 2)`` arrays of (candidate, negative) mass;
    ``candidates`` is the boolean ``(n, C)`` membership mask derived from the
    weak view and shared by both views.
    """

    weak: np.ndarray
    strong: np.ndarray
    candidates: np.ndarray
    k: np.ndarray

    @property
    def candidate_mass(self):
        return self.weak[:, 0]

    @property
    def negative_mass(self):
        return self.weak[:, 1]

    def candidate_set(self, i):
        return set(np.flatnonzero(self.candidates[i]).tolist())


def candidate_mask(p_tilde, k):
    p = np.atleast_2d(np.asarray(p_tilde, dtype=np.float64))
    n, C = p.shape
    k = np.broadcast_to(np.asarray(k), (n,))
    if np.any(k < 1) or np.any(k > C):
        raise ValueError(f"k must be in [1, {C}]")
    rank = np.empty((n, C), dtype=np.int64)
    np.put_along_axis(rank, descending_order(p), np.arange(C)[None, :].repeat(n, 0), axis=1)
    return rank < k[:, None]


def _split(probs, mask):
    return np.stack([np.where(mask, probs, 0.0).sum(axis=1),
                     np.where(mask, 0.0, probs).sum(axis=1)], axis=1)


def binary_division(p_tilde, q, k):
    p = np.atleast_2d(np.asarray(p_tilde, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    mask = candidate_mask(p, k)
    return BinaryDivision(_split(p, mask), _split(q, mask), mask,
                          np.broadcast_to(np.asarray(k), (p.shape[0],)).copy())


def bcc_loss(b_weak, b_strong):
    """Mean two-class cross-entropy ``H(b_weak, b_strong)`` over the batch."""
    bw = np.atleast_2d(b_weak)
    bs = np.maximum(np.atleast_2d(b_strong), LOG_EPS)
    return float(np.mean(-np.sum(bw * np.log(bs), axis=1)))


def bcc_logit_grad(division: BinaryDivision, q):
    """d(bcc_loss)/d(strong logits); the weak split is a constant target."""
    q = np.atleast_2d(q)
    n = q.shape[0]
    a = division.weak
    s = division.strong
    mask = division.candidates
    # dL/ds_j for the candidate (j=0) and negative (j=1) masses, zero where the log clamp is active
    dl_ds = np.where(s > LOG_EPS, -a / np.maximum(s, LOG_EPS), 0.0) / n
    # ds_cand/dz = q * (1[cand] - s_cand), ds_neg/dz = q * (1[neg] - s_neg)
    d_cand = q * (mask - s[:, :1])
    d_neg = q * (~mask - s[:, 1:])
    return dl_ds[:, :1] * d_cand + dl_ds[:, 1:] * d_neg
