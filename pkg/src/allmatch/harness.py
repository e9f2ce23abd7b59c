"""Training loop, metrics, checkpoints and multi-seed experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .bcc import BccState, bcc_logit_grad, bcc_loss, binary_division
from .config import TrainConfig
from .data import (AugmentationSpec, BatchIterator, LongTailSpec, SslDataset, load_csv,
                   make_gaussian_mixture, make_long_tailed)
from .prob import LOG_EPS, DaState, cross_entropy, descending_order, one_hot, softmax
from .strategies import make_strategy

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "loss_s", "loss_u", "loss_b", "loss_total", "lr", "tau_global",
                  "util_ratio", "sel_pl_acc", "drop_pl_acc", "top5_pl_acc", "binary_pl_acc",
                  "mean_k", "test_acc")


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, losses):
        super().__init__(f"non-finite loss at iteration {iteration}: {losses}")
        self.iteration = iteration
        self.losses = losses


def supervised_loss(probs, labels):
    """Mean one-hot cross-entropy and its gradient w.r.t. the labeled logits."""
    target = one_hot(labels, probs.shape[1])
    loss = float(np.mean(cross_entropy(target, probs)))
    return loss, (probs - target) / len(labels)


def unsupervised_loss(p_tilde, q, weights):
    """``sum_i w_i H(onehot(argmax p~_i), q_i) / B_U`` and its gradient w.r.t. strong logits.

    The denominator is the full batch size, not the number of masked-in samples.
    """
    n = len(q)
    pseudo = one_hot(np.argmax(p_tilde, axis=1), q.shape[1])
    loss = float(np.sum(weights * cross_entropy(pseudo, q)) / n)
    # -log(max(q_y, eps)) is flat where the clamp is active
    live = (np.sum(pseudo * q, axis=1) > LOG_EPS).astype(np.float64)
    grad = (weights * live)[:, None] * (q - pseudo) / n
    return loss, grad


def evaluate(model: nn.Mlp, x, y, params=None):
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    _, logits, _ = nn.forward(model, x, keep_cache=False, params=params)
    return float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class MetricsRecord:
    iteration: int
    loss_s: float
    loss_u: float
    loss_b: float
    loss_total: float
    lr: float
    tau_global: float
    class_thresholds: list = field(default_factory=list)
    util_ratio: float = math.nan
    sel_pl_acc: float = math.nan
    drop_pl_acc: float = math.nan
    top5_pl_acc: float = math.nan
    binary_pl_acc: float = math.nan
    pl_acc: float = math.nan
    mean_k: float = math.nan
    test_acc: float | None = None

    def csv_row(self):
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(float(v)) if not isinstance(v, int) else str(v)
        return [fmt(getattr(self, c)) for c in METRIC_COLUMNS]


def make_dataset(config: TrainConfig, seed) -> SslDataset:
    d = config.data
    data_seed = seed if d.seed is None else d.seed
    if d.kind == "gaussian":
        return make_gaussian_mixture(d.num_classes, d.per_class_labeled, d.per_class_unlabeled,
                                     d.dim, d.separation, data_seed, d.per_class_test)
    if d.kind == "long_tailed":
        return make_long_tailed(LongTailSpec(d.n1, d.m1, d.gamma, d.num_classes),
                                d.dim, d.separation, data_seed, d.per_class_test)
    return load_csv(d.csv_path)


def _state_arrays(arrays):
    return {k: v.tolist() for k, v in arrays.items()}


def _load_arrays(raw):
    return {k: np.asarray(v, dtype=np.float64) for k, v in raw.items()}


class Trainer:
    """One seeded training run; owns the model, optimizer, EMA and all threshold states."""

    def __init__(self, config: TrainConfig, seed, dataset: SslDataset | None = None):
        self.config = config
        self.seed = seed
        self.dataset = make_dataset(config, seed) if dataset is None else dataset
        C = self.dataset.num_classes
        model_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
        self.model = nn.Mlp.init(self.dataset.dim, config.model.hidden_dims, C,
                                 np.random.default_rng(model_ss))
        self.ema = nn.EmaModel.from_model(self.model, config.optim.ema_decay)
        self.optimizer = nn.SgdOptimizer(config.optim.lr, config.total_iterations,
                                         config.optim.momentum, config.optim.weight_decay)
        self.batches = BatchIterator(
            self.dataset, config.batch_labeled, config.batch_unlabeled,
            AugmentationSpec(config.augment.weak_sigma, config.augment.strong_sigma,
                             config.augment.dropout), batch_ss)
        self.da = DaState(C, config.momentum)
        self.strategy = make_strategy(config.strategy, C, config.momentum, config.fixmatch_tau,
                                      config.clamp_range, config.uniform_norms, config.softmatch_n)
        self.bcc = BccState(C, min(config.cap_k, C), config.momentum)
        self.iteration = 0
        self.last_masks = None

    @property
    def unsupervised_active(self):
        return (self.config.lambda_u > 0 or self.config.lambda_b > 0) and len(self.dataset.unlabeled_x) > 0

    def train_step(self, with_metrics=False):
        """One optimization step; returns a MetricsRecord when ``with_metrics``."""
        cfg = self.config
        batch = next(self.batches)
        n_l = len(batch.labeled_y)
        lr = self.optimizer.lr
        loss_u = loss_b = 0.0
        record = {}

        if not self.unsupervised_active:
            _, logits, cache = nn.forward(self.model, batch.labeled_x)
            loss_s, grad_l = supervised_loss(softmax(logits), batch.labeled_y)
            logit_grads = grad_l
        else:
            # weak view: live model, no cache, never differentiated
            _, weak_logits, _ = nn.forward(self.model, batch.weak, keep_cache=False)
            p = softmax(weak_logits)
            if cfg.use_da:
                self.da.update(p.mean(axis=0))
                p_tilde = self.da.apply(p)
            else:
                p_tilde = p
            self.strategy.update(p, p_tilde, nn.classifier_weight_norms(self.ema))
            weights = self.strategy.weights(p_tilde)
            self.last_masks = weights
            self.bcc.update_mu(p_tilde)
            k = self.bcc.select_k(p_tilde, weights >= 1.0)

            _, logits, cache = nn.forward(self.model, np.concatenate([batch.labeled_x, batch.strong]))
            probs = softmax(logits)
            q = probs[n_l:]
            loss_s, grad_l = supervised_loss(probs[:n_l], batch.labeled_y)
            division = binary_division(p_tilde, q, k)
            grad_u = np.zeros_like(q)
            if cfg.lambda_u > 0:
                loss_u, g = unsupervised_loss(p_tilde, q, weights)
                grad_u += cfg.lambda_u * g
            if cfg.lambda_b > 0:
                loss_b = bcc_loss(division.weak, division.strong)
                grad_u += cfg.lambda_b * bcc_logit_grad(division, q)
            logit_grads = np.concatenate([grad_l, grad_u])
            if with_metrics:
                record = self._pseudo_label_metrics(p_tilde, division, batch.unlabeled_truth)

        loss_total = loss_s + cfg.lambda_u * loss_u + cfg.lambda_b * loss_b
        if not math.isfinite(loss_total):
            raise TrainingAborted(self.iteration + 1, {"loss_s": loss_s, "loss_u": loss_u, "loss_b": loss_b})
        grads = nn.backward(self.model, cache, logit_grads)
        self.optimizer.step(self.model, grads)
        self.ema.update(self.model)
        self.iteration += 1
        if not with_metrics:
            return None
        thresholds = getattr(self.strategy, "cat", None)
        return MetricsRecord(
            iteration=self.iteration, loss_s=loss_s, loss_u=loss_u, loss_b=loss_b,
            loss_total=loss_total, lr=lr, tau_global=self._tau_global(),
            class_thresholds=(thresholds.class_thresholds.tolist() if thresholds is not None else []),
            **record)

    def _tau_global(self):
        tau = getattr(self.strategy, "tau_global", None)
        return float(tau) if tau is not None else float(self.strategy.class_average_threshold())

    def _pseudo_label_metrics(self, p_tilde, division, truth):
        pseudo = np.argmax(p_tilde, axis=1)
        correct = pseudo == truth
        selected = self.strategy.selected(p_tilde)
        top = descending_order(p_tilde)[:, :min(5, p_tilde.shape[1])]
        in_candidates = division.candidates[np.arange(len(truth)), truth]

        def acc(mask):
            return float(correct[mask].mean()) if mask.any() else math.nan

        return {
            "util_ratio": float(selected.mean()),
            "sel_pl_acc": acc(selected),
            "drop_pl_acc": acc(~selected),
            "top5_pl_acc": float(np.mean(np.any(top == truth[:, None], axis=1))),
            "binary_pl_acc": float(in_candidates.mean()),
            "pl_acc": float(correct.mean()),
            "mean_k": float(division.k.mean()),
        }

    def evaluate(self, use_ema=True):
        params = self.ema.shadow if use_ema else None
        return evaluate(self.model, self.dataset.test_x, self.dataset.test_y, params=params)

    def run(self, metrics_path=None, checkpoint_path=None, stop_at=None):
        """Train until ``total_iterations`` (or ``stop_at``); returns the logged records."""
        cfg = self.config
        end = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
        writer = MetricsWriter(metrics_path, self.iteration) if metrics_path else None
        records = []
        try:
            while self.iteration < end:
                it = self.iteration + 1
                log_now = it % cfg.log_every == 0 or it == cfg.total_iterations
                rec = self.train_step(with_metrics=log_now)
                if rec is not None:
                    if it % cfg.eval_every == 0 or it == cfg.total_iterations:
                        rec.test_acc = self.evaluate()
                    records.append(rec)
                    if writer:
                        writer.write(rec)
                if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                    save_checkpoint(self, checkpoint_path)
        finally:
            if writer:
                writer.close()
        if checkpoint_path:
            save_checkpoint(self, checkpoint_path)
        return records

    def state_dict(self):
        return {
            "iteration": self.iteration,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "model": _state_arrays(self.model.params),
            "optimizer": {"iteration": self.optimizer.iteration,
                          "velocity": _state_arrays(self.optimizer.velocity)},
            "ema": _state_arrays(self.ema.shadow),
            "da": {"running_mean": self.da.running_mean.tolist(), "momentum": self.da.momentum},
            "strategy": {"name": self.strategy.name, **self.strategy.state_dict()},
            "bcc": self.bcc.state_dict(),
            "batches": self.batches.state_dict(),
        }

    def load_state_dict(self, state):
        self.iteration = int(state["iteration"])
        self.model.params = _load_arrays(state["model"])
        self.model.touch()
        self.optimizer.iteration = int(state["optimizer"]["iteration"])
        self.optimizer.velocity = _load_arrays(state["optimizer"]["velocity"])
        self.ema.shadow = _load_arrays(state["ema"])
        self.da.running_mean = np.asarray(state["da"]["running_mean"], dtype=np.float64)
        self.da.momentum = float(state["da"]["momentum"])
        self.strategy.load_state_dict(state["strategy"])
        self.bcc.load_state_dict(state["bcc"])
        self.batches.load_state_dict(state["batches"])

    @classmethod
    def from_checkpoint(cls, path, dataset=None):
        state = json.loads(Path(path).read_text())
        trainer = cls(TrainConfig.from_dict(state["config"]), state["seed"], dataset)
        trainer.load_state_dict(state)
        return trainer


def save_checkpoint(trainer: Trainer, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(trainer.state_dict()))
    tmp.replace(path)


class MetricsWriter:
    """Appends metric rows; on resume, drops rows logged after the resume point."""

    def __init__(self, path, start_iteration=0):
        path = Path(path)
        keep = []
        if start_iteration > 0 and path.exists():
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            keep = [r for r in rows[1:] if r and int(r[0]) <= start_iteration]
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRIC_COLUMNS)
        self._w.writerows(keep)

    def write(self, record: MetricsRecord):
        self._w.writerow(record.csv_row())

    def close(self):
        self._fh.close()


def read_metrics(path):
    """Load a metrics CSV into a list of dicts (empty cells become None)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (None if v == "" else (int(v) if k == "iteration" else float(v)))
                    for k, v in r.items()})
    return out


def _run_seed(config: TrainConfig, seed, out_dir):
    out = Path(out_dir) if out_dir else None
    try:
        trainer = Trainer(config, seed)
        metrics = out / f"metrics_seed{seed}.csv" if out else None
        ckpt = out / f"checkpoint_seed{seed}.json" if out else None
        records = trainer.run(metrics, ckpt)
        return {"seed": seed, "final_test_acc": records[-1].test_acc, "records": records}
    except TrainingAborted as exc:
        diag = {"seed": seed, "iteration": exc.iteration, "losses": exc.losses}
        if out:
            (out / f"aborted_seed{seed}.json").write_text(json.dumps(diag, indent=2))
        log.error("seed %s aborted: %s", seed, exc)
        return {"seed": seed, "failed": diag}


def summarize(config, results, wall_clock):
    finals = [r["final_test_acc"] for r in results if "final_test_acc" in r]
    return {
        "strategy": config.strategy,
        "config": config.to_dict(),
        "seeds": [r["seed"] for r in results],
        "finals": {str(r["seed"]): r.get("final_test_acc") for r in results},
        "failed": [r["failed"] for r in results if "failed" in r],
        "mean": float(np.mean(finals)) if finals else None,
        "std": float(np.std(finals)) if finals else None,
        "wall_clock_seconds": wall_clock,
    }


def run_experiment(config: TrainConfig, seeds=None, out_dir=None, jobs=1, keep_records=False):
    """Train once per seed; writes per-seed metrics CSVs and ``summary.json`` under ``out_dir``."""
    seeds = list(config.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_seed, [config] * len(seeds), seeds, [out_dir] * len(seeds)))
    else:
        results = [_run_seed(config, s, out_dir) for s in seeds]
    summary = summarize(config, results, time.perf_counter() - start)
    if out_dir:
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=2))
    if keep_records:
        summary["records"] = {r["seed"]: r.get("records") for r in results}
    return summary
