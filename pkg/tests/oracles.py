"""Scalar, loop-based reference implementations used as independent test oracles.

Nothing here imports the package; every formula is written out element by element.
"""

import math


def ranked(p):
    return sorted(range(len(p)), key=lambda c: (-p[c], c))


def topk(p, k):
    order = ranked(p)
    total = 0.0
    for j in range(k):
        total += p[order[j]]
    return total


def tau_sequence(batches, momentum, num_classes, clamp=None):
    tau = 1.0 / num_classes
    if clamp:
        tau = min(max(tau, clamp[0]), clamp[1])
    out = []
    for batch in batches:
        s = 0.0
        for p in batch:
            s += max(p)
        tau = momentum * tau + (1.0 - momentum) * (s / len(batch))
        if clamp:
            tau = min(max(tau, clamp[0]), clamp[1])
        out.append(tau)
    return out


def class_thresholds(tau, norms):
    top = max(norms)
    if top == 0:
        return [tau] * len(norms)
    return [tau * n / top for n in norms]


def mask(p, thresholds):
    best = 0
    for c in range(1, len(p)):
        if p[c] > p[best]:
            best = c
    return 1.0 if p[best] >= thresholds[best] else 0.0


def mu_sequence(batches, momentum, num_classes):
    mu = [k / num_classes for k in range(1, num_classes + 1)]
    out = []
    for batch in batches:
        new = []
        for k in range(1, num_classes + 1):
            s = 0.0
            for p in batch:
                s += topk(p, k)
            new.append(momentum * mu[k - 1] + (1.0 - momentum) * s / len(batch))
        mu = new
        out.append(list(mu))
    return out


def select_k(p, mu, cap, confident):
    if confident:
        return 1
    for k in range(1, len(p) + 1):
        if topk(p, k) >= mu[k - 1]:
            return min(k, cap)
    return cap


def division(p, q, k):
    order = ranked(p)
    chosen = set(order[:k])
    wc = sum(p[c] for c in range(len(p)) if c in chosen)
    wn = sum(p[c] for c in range(len(p)) if c not in chosen)
    sc = sum(q[c] for c in range(len(q)) if c in chosen)
    sn = sum(q[c] for c in range(len(q)) if c not in chosen)
    return (wc, wn), (sc, sn), chosen


def binary_ce(a, b):
    return -(a[0] * math.log(max(b[0], 1e-12)) + a[1] * math.log(max(b[1], 1e-12)))


def softmatch(c, mu, sigma, n):
    gap = min(c - mu, 0.0)
    return math.exp(-gap * gap / (2.0 * (sigma / n) ** 2))


def tau_step(tau, batch, momentum):
    s = 0.0
    for p in batch:
        s += max(p)
    return momentum * tau + (1.0 - momentum) * s / len(batch)


def mu_step(mu, batch, momentum):
    out = []
    for k in range(1, len(mu) + 1):
        s = 0.0
        for p in batch:
            s += topk(p, k)
        out.append(momentum * mu[k - 1] + (1.0 - momentum) * s / len(batch))
    return out
