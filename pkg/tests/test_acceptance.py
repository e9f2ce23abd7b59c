"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line in the terminal summary.

Run alone with ``pytest -m acceptance``. The desk experiment dominates the runtime (a few minutes).
"""

import json
import math
import time

import numpy as np
import pytest
from mpmath import mp, mpf

import oracles
from allmatch.bcc import BccState, binary_division
from allmatch.cat import CatState
from allmatch.config import TrainConfig
from allmatch.data import long_tail_counts
from allmatch.gradcheck import TOLERANCE, run_gradcheck
from allmatch.harness import Trainer, read_metrics, run_experiment
from allmatch.prob import topk_masses
from allmatch.strategies import softmatch_weight

pytestmark = pytest.mark.acceptance

DESK_SEEDS = (1, 2, 3, 4, 5)
N_CASES = 10_000


def _random_prob(rng, C):
    p = rng.dirichlet(np.full(C, rng.choice([0.1, 0.5, 1.0, 5.0])))
    if rng.random() < 0.2:
        # inject an exact tie to exercise the ranking rule
        i, j = rng.choice(C, size=2, replace=False)
        p[j] = p[i]
        p = p / p.sum()
    return p


def test_1_formula_oracles(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}

    def track(name, got, want):
        err = float(np.max(np.abs(np.asarray(got, dtype=float) - np.asarray(want, dtype=float)), initial=0.0))
        worst[name] = max(worst.get(name, 0.0), err)

    exact = {"mask": True, "select_k": True, "candidates": True}
    for _ in range(N_CASES):
        C = int(rng.integers(2, 13))
        m = float(rng.choice([0.0, 0.5, 0.9, 0.999]))
        batch = np.stack([_random_prob(rng, C) for _ in range(int(rng.integers(1, 5)))])
        plist = [list(p) for p in batch]

        cat = CatState(C, momentum=m)
        cat.tau_global = float(rng.random())
        before = cat.tau_global
        cat.update_global(batch)
        track("global threshold", cat.tau_global, oracles.tau_step(before, plist, m))

        norms = rng.random(C) * 3 * (rng.random() > 0.02)
        cat.update_local(norms)
        track("class thresholds", cat.class_thresholds,
              oracles.class_thresholds(cat.tau_global, list(norms)))
        exact["mask"] &= cat.mask(batch).tolist() == [oracles.mask(p, list(cat.class_thresholds))
                                                       for p in plist]

        p = batch[0]
        track("top-k mass", topk_masses(p), [oracles.topk(list(p), k) for k in range(1, C + 1)])

        bcc = BccState(C, cap=int(rng.integers(1, C + 1)), momentum=m)
        mu = np.sort(rng.random(C))
        mu[-1] = 1.0
        bcc.mu = mu.copy()
        bcc.update_mu(batch)
        track("top-k EMA", bcc.mu, oracles.mu_step(list(mu), plist, m))

        confident = bool(rng.random() < 0.3)
        exact["select_k"] &= int(bcc.select_k(p, confident)[0]) == oracles.select_k(
            list(p), list(bcc.mu), bcc.cap, confident)

        q = _random_prob(rng, C)
        k = int(rng.integers(1, C + 1))
        div = binary_division(p, q, k)
        (wc, wn), (sc, sn), chosen = oracles.division(list(p), list(q), k)
        track("weak division", div.weak[0], [wc, wn])
        track("strong division", div.strong[0], [sc, sn])
        exact["candidates"] &= div.candidate_set(0) == chosen

    mu_t, sigma_t = 0.7, 0.1
    soft_at_mu = float(softmatch_weight(mu_t, mu_t, sigma_t, n=2))
    soft_drop = float(softmatch_weight(mu_t - sigma_t, mu_t, sigma_t, n=2))
    elapsed = time.perf_counter() - start

    ok = (all(v <= 1e-12 for v in worst.values()) and all(exact.values())
          and soft_at_mu == 1.0 and abs(soft_drop - math.exp(-2)) <= 1e-12 and elapsed < 10)
    detail = (f"{N_CASES} cases, max abs err {max(worst.values()):.1e}, "
              f"exact-match {all(exact.values())}, softmatch w(mu)={soft_at_mu} "
              f"w(mu-sigma)={soft_drop:.12f} (e^-2={math.exp(-2):.12f}), {elapsed:.1f}s")
    criterion(1, "formula oracles to 1e-12", ok, detail)


def test_2_gradient_suite(criterion):
    start = time.perf_counter()
    reports = run_gradcheck(draws=20, seed=7)
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = all(r.max_rel_error < TOLERANCE for r in reports) and elapsed < 60
    detail = ", ".join(f"{r.name} {r.max_rel_error:.1e}" for r in reports) + \
        f"; worst {worst.name} at {worst.worst_param}; {elapsed:.1f}s"
    criterion(2, "analytic vs finite-difference gradients < 1e-4", ok, detail)


def _mask_trace(cfg, seed, iterations):
    trainer = Trainer(cfg, seed)
    masks = []
    for _ in range(iterations):
        trainer.train_step()
        masks.append(trainer.last_masks.copy())
    return masks


def test_3_reduction_equivalences(criterion):
    base = TrainConfig().with_overrides({"total_iterations": 500, "lambda_b": 0.0})
    allm = _mask_trace(base.with_overrides({"strategy": "allmatch", "uniform_norms": True}), 11, 500)
    free = _mask_trace(base.with_overrides({"strategy": "freematch"}), 11, 500)
    frozen = _mask_trace(base.with_overrides({"strategy": "freematch", "clamp_range": [0.95, 0.95]}), 11, 500)
    fix = _mask_trace(base.with_overrides({"strategy": "fixmatch", "fixmatch_tau": 0.95}), 11, 500)
    same_free = sum(np.array_equal(a, b) for a, b in zip(allm, free))
    same_fix = sum(np.array_equal(a, b) for a, b in zip(frozen, fix))
    ok = same_free == 500 and same_fix == 500
    detail = (f"AllMatch(uniform norms)==FreeMatch on {same_free}/500 iterations, "
              f"frozen-tau FreeMatch==FixMatch on {same_fix}/500; "
              f"final mask sums {int(allm[-1].sum())}/{int(fix[-1].sum())}")
    criterion(3, "reduction equivalences, bitwise over 500 iterations", ok, detail)


def test_4_candidate_superset(criterion):
    checked, violations = 0, []
    for kind in ("gaussian", "long_tailed"):
        cfg = TrainConfig().with_overrides({"total_iterations": 2000, "log_every": 10,
                                            "eval_every": 2000, "data.kind": kind})
        for seed in (1, 2, 3):
            for rec in Trainer(cfg, seed).run():
                checked += 1
                if rec.binary_pl_acc < rec.pl_acc:
                    violations.append((kind, seed, rec.iteration))
    ok = not violations and checked >= 6 * 200
    criterion(4, "binary pseudo-label accuracy >= top-1 pseudo-label accuracy", ok,
              f"{checked} logged iterations over 3 seeds x 2 datasets, {len(violations)} violations")


DESK_CELLS = {
    "supervised": {"strategy": "fixmatch", "lambda_u": 0.0, "lambda_b": 0.0},
    "fixmatch": {"strategy": "fixmatch", "fixmatch_tau": 0.95, "lambda_b": 0.0},
    "cat_only": {"strategy": "allmatch", "lambda_b": 0.0},
    "allmatch": {"strategy": "allmatch", "lambda_b": 1.0},
}


@pytest.fixture(scope="session")
def desk_experiment():
    start = time.perf_counter()
    base = TrainConfig().with_overrides({"seeds": list(DESK_SEEDS)})
    results = {name: run_experiment(base.with_overrides(over), keep_records=True)
               for name, over in DESK_CELLS.items()}
    return results, time.perf_counter() - start


def test_5_desk_experiment(criterion, desk_experiment):
    results, elapsed = desk_experiment
    acc = {name: 100 * r["mean"] for name, r in results.items()}
    sup, fix, cat, full = acc["supervised"], acc["fixmatch"], acc["cat_only"], acc["allmatch"]
    checks = {
        "sup<fix": sup < fix,
        "fix<cat": fix < cat,
        "cat<=all": cat <= full,
        "all-sup>=10": full - sup >= 10.0,
        "all>=cat-0.5": full >= cat - 0.5,
        "runtime<600s": elapsed < 600,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"sup {sup:.2f}, FixMatch {fix:.2f}, CAT-only {cat:.2f}, AllMatch {full:.2f} "
              f"(gain {full - sup:+.2f}), {elapsed:.0f}s; failed: {', '.join(failed) or 'none'}")
    criterion(5, "desk-scale ordering sup < FixMatch < CAT-only <= AllMatch", not failed, detail)


def test_6_long_tail_counts(criterion):
    mp.dps = 50

    def reference(n1, gamma, C=10):
        out = []
        for c in range(1, C + 1):
            exact = mpf(n1) * mpf(gamma) ** (-mpf(c - 1) / (C - 1))
            out.append(max(1, int(mp.floor(exact + mpf("0.5")))))
        return out

    settings = [(1500, g) for g in (50, 100, 150)] + [(150, g) for g in (20, 50, 100)]
    mismatches = []
    for n1, gamma in settings:
        for base in (n1, 2 * n1):
            if long_tail_counts(base, gamma, 10) != reference(base, gamma):
                mismatches.append((base, gamma))
    tails = {f"{n1}/{g}": long_tail_counts(n1, g, 10)[-1] for n1, g in settings}
    criterion(6, "long-tail counts match high-precision reference", not mismatches,
              f"{len(settings) * 2} profiles checked (N_1 and M_1 = 2 N_1), tails {tails}, "
              f"mismatches {mismatches}")


def test_7_threshold_behaviour(criterion, desk_experiment):
    results, _ = desk_experiment
    records = results["allmatch"]["records"]
    monotone_seeds, util_ok, notes = 0, True, []
    for seed in DESK_SEEDS:
        tau = {r.iteration: r.tau_global for r in records[seed]}
        util = {r.iteration: r.util_ratio for r in records[seed]}
        last = max(tau)
        drops = [(t, tau[t + 500] - tau[t]) for t in sorted(tau) if t >= 1000 and t + 500 in tau
                 and tau[t + 500] < tau[t]]
        monotone_seeds += not drops
        util_ok &= util[last] > util[500]
        worst = min(drops, key=lambda d: d[1]) if drops else None
        notes.append(f"seed {seed}: tau {tau[1000]:.3f}->{tau[last]:.3f}, "
                     f"{len(drops)} decreasing windows"
                     + (f" (worst {worst[1]:+.1e} from it {worst[0]})" if worst else "")
                     + f", util {util[500]:.2f}->{util[last]:.2f}")
    ok = monotone_seeds >= 4 and util_ok
    criterion(7, "tau_global nondecreasing per 500-iteration window after 1000 (>=4/5 seeds), "
                 "utilization rises", ok, f"{monotone_seeds}/5 seeds monotone; " + "; ".join(notes))


def test_8_checkpoint_resume(criterion, tmp_path):
    cfg = TrainConfig().with_overrides({"total_iterations": 500, "log_every": 25, "eval_every": 100,
                                        "checkpoint_every": 100})
    full = tmp_path / "full.csv"
    Trainer(cfg, 3).run(full)
    reference = full.read_bytes()
    mismatched = []
    interrupts = (1, 37, 100, 250, 499)
    for stop in interrupts:
        metrics, ckpt = tmp_path / f"m{stop}.csv", tmp_path / f"c{stop}.json"
        Trainer(cfg, 3).run(metrics, ckpt, stop_at=stop)
        Trainer.from_checkpoint(ckpt).run(metrics)
        if metrics.read_bytes() != reference:
            mismatched.append(stop)
    # crash after the last periodic checkpoint: rows past it are rewritten on resume
    metrics, ckpt = tmp_path / "crash.csv", tmp_path / "crash.json"
    Trainer(cfg, 3).run(metrics, ckpt, stop_at=200)
    Trainer.from_checkpoint(ckpt).run(metrics, None, stop_at=330)
    Trainer.from_checkpoint(ckpt).run(metrics)
    crash_ok = metrics.read_bytes() == reference
    rows = len(read_metrics(full))
    criterion(8, "interrupt-and-resume reproduces metrics CSV byte-for-byte",
              not mismatched and crash_ok,
              f"interrupts at {list(interrupts)} and a crash replay, {rows} rows; mismatches {mismatched}, "
              f"crash replay {'identical' if crash_ok else 'differs'}")


def _state_size(state):
    return len(json.dumps(state))


def test_9_constant_state_size(criterion):
    sizes = {}
    for n in (10, 1000, 20000):
        cfg = TrainConfig().with_overrides({"total_iterations": 50, "data.per_class_unlabeled": n,
                                            "data.per_class_test": 10})
        trainer = Trainer(cfg, 1)
        for _ in range(50):
            trainer.train_step()
        cat, bcc = trainer.strategy.cat, trainer.bcc
        arrays = [v.size for obj in (cat, bcc) for v in vars(obj).values() if isinstance(v, np.ndarray)]
        sizes[n * 5] = (_state_size(cat.state_dict()), _state_size(bcc.state_dict()), sum(arrays))
    counts = {v[2] for v in sizes.values()}
    ok = len(counts) == 1 and counts.pop() <= 4 * 5
    criterion(9, "CatState/BccState size independent of unlabeled-set size", ok,
              "unlabeled size -> (cat json bytes, bcc json bytes, stored floats): "
              + ", ".join(f"{n}: {v}" for n, v in sizes.items()))
