"""Synthetic SSL datasets, augmentations, batching and CSV round-tripping."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("labeled", "unlabeled", "test")


class DataFormatError(ValueError):
    pass


@dataclass
class SslDataset:
    """Labeled, unlabeled and test splits.

    ``unlabeled_truth`` exists for metrics only; nothing in the loss code takes it.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_truth: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    @property
    def dim(self):
        return self.labeled_x.shape[1]

    def equals(self, other):
        return self.num_classes == other.num_classes and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("labeled_x", "labeled_y", "unlabeled_x", "unlabeled_truth", "test_x", "test_y"))

    def without_unlabeled(self):
        return SslDataset(self.labeled_x, self.labeled_y,
                          np.empty((0, self.dim)), np.empty(0, dtype=np.int64),
                          self.test_x, self.test_y, self.num_classes)


@dataclass(frozen=True)
class AugmentationSpec:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.5
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.weak_sigma <= self.strong_sigma:
            raise ValueError("need 0 <= weak_sigma <= strong_sigma")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError("dropout must be in [0, 0.5]")


@dataclass(frozen=True)
class LongTailSpec:
    n1: int
    m1: int
    gamma: float
    num_classes: int

    def __post_init__(self):
        if self.n1 < 1 or self.m1 < 1:
            raise ValueError("head counts must be >= 1")
        if self.gamma < 1:
            raise ValueError("imbalance ratio gamma must be >= 1")
        if self.num_classes < 2:
            raise ValueError("long-tailed split needs at least 2 classes")


def round_half_up(x):
    return int(math.floor(x + 0.5))


def long_tail_counts(head, gamma, num_classes):
    """``round(head * gamma^(-(c-1)/(C-1)))`` for c = 1..C, clamped to >= 1."""
    counts = []
    for c in range(1, num_classes + 1):
        n = round_half_up(head * gamma ** (-(c - 1) / (num_classes - 1)))
        if n < 1:
            warnings.warn(f"long-tail count for class {c} rounds to {n}; clamped to 1", stacklevel=2)
            n = 1
        counts.append(n)
    return counts


def class_means(num_classes, dim, separation):
    """Means on a circle of radius ``separation`` in the first two coordinates."""
    means = np.zeros((num_classes, dim))
    if dim == 1:
        means[:, 0] = separation * np.arange(num_classes)
    else:
        angle = 2.0 * np.pi * np.arange(num_classes) / num_classes
        means[:, 0] = separation * np.cos(angle)
        means[:, 1] = separation * np.sin(angle)
    return means


def _sample(rng, means, counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    x = means[labels] + rng.standard_normal((len(labels), means.shape[1]))
    return x, labels


def make_from_counts(labeled_counts, unlabeled_counts, dim=2, separation=3.0,
                     per_class_test=500, seed=0):
    C = len(labeled_counts)
    rng = np.random.default_rng(seed)
    means = class_means(C, dim, separation)
    lx, ly = _sample(rng, means, labeled_counts)
    ux, uy = _sample(rng, means, unlabeled_counts)
    tx, ty = _sample(rng, means, [per_class_test] * C)
    return SslDataset(lx, ly, ux, uy, tx, ty, C)


def make_gaussian_mixture(num_classes, per_class_labeled, per_class_unlabeled, dim=2,
                          separation=3.0, seed=0, per_class_test=500):
    if min(num_classes, per_class_labeled, per_class_unlabeled, dim) < 1:
        raise ValueError("counts and dim must be >= 1")
    if separation <= 0:
        raise ValueError("separation must be > 0")
    return make_from_counts([per_class_labeled] * num_classes, [per_class_unlabeled] * num_classes,
                            dim, separation, per_class_test, seed)


def make_long_tailed(spec: LongTailSpec, dim=2, separation=3.0, seed=0, per_class_test=500):
    """Long-tailed labeled/unlabeled splits with a balanced test split."""
    return make_from_counts(long_tail_counts(spec.n1, spec.gamma, spec.num_classes),
                            long_tail_counts(spec.m1, spec.gamma, spec.num_classes),
                            dim, separation, per_class_test, seed)


def augment(x, spec: AugmentationSpec, view, rng):
    """Weak: additive Gaussian noise. Strong: larger noise, then per-coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    if view == "weak":
        if spec.weak_sigma == 0.0:
            return x.copy()
        return x + spec.weak_sigma * rng.standard_normal(x.shape)
    if view == "strong":
        out = x + spec.strong_sigma * rng.standard_normal(x.shape) if spec.strong_sigma else x.copy()
        if spec.dropout:
            out = out * (rng.random(x.shape) >= spec.dropout)
        return out
    raise ValueError(f"view must be 'weak' or 'strong', got {view!r}")


@dataclass
class Batch:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    weak: np.ndarray
    strong: np.ndarray
    unlabeled_truth: np.ndarray
    unlabeled_index: np.ndarray


def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class BatchIterator:
    """Endless stream of batches; labeled drawn with replacement, unlabeled by epoch.

    Unlabeled indices come from a running sequence of per-epoch permutations, so
    the first ``len(unlabeled)`` draws always cover every sample exactly once.
    Labeled sampling, shuffling and augmentation use independent RNG streams;
    the labeled stream is therefore unaffected by the unlabeled split.
    The whole cursor is serializable through ``state_dict``.
    """

    def __init__(self, dataset: SslDataset, batch_labeled, batch_unlabeled,
                 augmentation: AugmentationSpec, seed):
        self.dataset = dataset
        self.batch_labeled = int(batch_labeled)
        self.batch_unlabeled = int(batch_unlabeled)
        self.augmentation = augmentation
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        lab, shuf, aug = seed.spawn(3)
        self.rng_labeled = np.random.default_rng(lab)
        self.rng_shuffle = np.random.default_rng(shuf)
        self.rng_augment = np.random.default_rng(aug)
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def __iter__(self):
        return self

    def _take_unlabeled(self, count):
        n = len(self.dataset.unlabeled_x)
        if n == 0:
            return np.empty(0, dtype=np.int64)
        out = []
        while count > 0:
            if self.pos >= len(self.order):
                self.order = self.rng_shuffle.permutation(n)
                self.pos = 0
            take = self.order[self.pos:self.pos + count]
            self.pos += len(take)
            count -= len(take)
            out.append(take)
        return np.concatenate(out)

    def __next__(self):
        ds = self.dataset
        li = self.rng_labeled.integers(0, len(ds.labeled_x), size=self.batch_labeled)
        ui = self._take_unlabeled(self.batch_unlabeled)
        u = ds.unlabeled_x[ui]
        weak = augment(u, self.augmentation, "weak", self.rng_augment)
        strong = augment(u, self.augmentation, "strong", self.rng_augment)
        return Batch(ds.labeled_x[li], ds.labeled_y[li], weak, strong, ds.unlabeled_truth[ui], ui)

    def state_dict(self):
        return {
            "rng_labeled": self.rng_labeled.bit_generator.state,
            "rng_shuffle": self.rng_shuffle.bit_generator.state,
            "rng_augment": self.rng_augment.bit_generator.state,
            "order": self.order.tolist(),
            "pos": self.pos,
        }

    def load_state_dict(self, state):
        self.rng_labeled = _rng_from_state(state["rng_labeled"])
        self.rng_shuffle = _rng_from_state(state["rng_shuffle"])
        self.rng_augment = _rng_from_state(state["rng_augment"])
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])


def batch_iterator(dataset, batch_labeled, batch_unlabeled, augmentation=None, seed=0):
    return BatchIterator(dataset, batch_labeled, batch_unlabeled,
                         augmentation or AugmentationSpec(), seed)


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(dataset: SslDataset, path):
    """Write ``f0..f{d-1},label,split`` rows; 17 significant digits round-trip float64."""
    d = dataset.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(d)] + ["label", "split"])
        for split, xs, ys in (("labeled", dataset.labeled_x, dataset.labeled_y),
                              ("unlabeled", dataset.unlabeled_x, dataset.unlabeled_truth),
                              ("test", dataset.test_x, dataset.test_y)):
            for x, y in zip(xs, ys):
                w.writerow([_fmt(v) for v in x] + [int(y), split])


def load_csv(path, feature_columns=None, label_column="label", split_column="split",
             num_classes=None):
    """Read a dataset CSV; rows are routed to splits by ``split_column``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if feature_columns is None:
            feature_columns = [h for h in header if h not in (label_column, split_column)]
        for col in list(feature_columns) + [label_column, split_column]:
            if col not in header:
                raise DataFormatError(f"{path}: missing column {col!r}")
        fi = [header.index(c) for c in feature_columns]
        li, si = header.index(label_column), header.index(split_column)
        rows = {s: ([], []) for s in SPLITS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = [float(row[i]) for i in fi]
                y = int(row[li])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            split = row[si]
            if split not in rows:
                raise DataFormatError(f"{path}:{lineno}: unknown split {split!r}")
            if y < 0 or (num_classes is not None and y >= num_classes):
                raise DataFormatError(f"{path}:{lineno}: unknown label {y}")
            rows[split][0].append(x)
            rows[split][1].append(y)
    if not rows["labeled"][0]:
        raise DataFormatError(f"{path}: no labeled rows")
    if num_classes is None:
        num_classes = 1 + max(max(ys) for _, ys in rows.values() if ys)
    d = len(fi)

    def arrays(split):
        xs, ys = rows[split]
        return np.asarray(xs, dtype=np.float64).reshape(len(xs), d), np.asarray(ys, dtype=np.int64)

    (lx, ly), (ux, uy), (tx, ty) = (arrays(s) for s in SPLITS)
    return SslDataset(lx, ly, ux, uy, tx, ty, int(num_classes))
