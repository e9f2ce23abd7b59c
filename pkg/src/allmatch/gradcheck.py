"""Central finite-difference check of the analytic gradients of every loss term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .bcc import bcc_logit_grad, bcc_loss, binary_division
from .harness import supervised_loss, unsupervised_loss
from .prob import softmax

STEP = 1e-5
TOLERANCE = 1e-4
# gradient entries smaller than this are compared in absolute terms
REL_FLOOR = 1e-6
KINK_MARGIN = 1e-3


@dataclass
class ComponentReport:
    name: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple

    @property
    def ok(self):
        return self.max_rel_error < TOLERANCE


def _loss_fns(rng, n, C):
    labels = rng.integers(0, C, size=n)
    p_tilde = rng.dirichlet(np.full(C, 0.5), size=n)
    weights = np.where(rng.random(n) < 0.3, 0.0, rng.uniform(0.2, 1.0, size=n))
    weights[rng.random(n) < 0.3] = 1.0
    k = rng.integers(1, C + 1, size=n)

    def ls(logits):
        return supervised_loss(softmax(logits), labels)

    def lu(logits):
        return unsupervised_loss(p_tilde, softmax(logits), weights)

    def lb(logits):
        q = softmax(logits)
        div = binary_division(p_tilde, q, k)
        return bcc_loss(div.weak, div.strong), bcc_logit_grad(div, q)

    return {"L_s": ls, "L_u": lu, "L_b": lb}


def _kink_free_inputs(model, rng, n):
    for _ in range(1000):
        x = rng.standard_normal((n, model.input_dim))
        h, ok = x, True
        for i in range(model.num_layers):
            pre = h @ model.params[f"enc{i}.W"].T + model.params[f"enc{i}.b"]
            ok &= bool(np.all(np.abs(pre) > KINK_MARGIN))
            h = np.maximum(pre, 0.0)
        if ok:
            return x
    raise RuntimeError("could not draw inputs away from ReLU kinks")


def check_draw(model, x, loss_fn, backward_fn=nn.backward):
    _, logits, cache = nn.forward(model, x)
    _, dlogits = loss_fn(logits)
    analytic = backward_fn(model, cache, dlogits)
    worst = (0.0, "", ())
    for name, param in model.params.items():
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + STEP
            up = loss_fn(nn.forward(model, x, keep_cache=False)[1])[0]
            param[idx] = old - STEP
            down = loss_fn(nn.forward(model, x, keep_cache=False)[1])[0]
            param[idx] = old
            numeric = (up - down) / (2 * STEP)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            if err > worst[0]:
                worst = (err, name, idx)
    return worst


def run_gradcheck(input_dim=3, hidden_dims=(6, 5), num_classes=4, batch=6, draws=20, seed=0,
                  backward_fn=nn.backward):
    """Worst relative error per loss component over ``draws`` random models and batches."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(draws):
        model = nn.Mlp.init(input_dim, hidden_dims, num_classes, rng)
        # move biases off zero so kinks are not aligned at the origin
        for name, p in model.params.items():
            if name.endswith(".b"):
                p[:] = rng.uniform(-0.5, 0.5, size=p.shape)
        x = _kink_free_inputs(model, rng, batch)
        for comp, fn in _loss_fns(rng, batch, num_classes).items():
            err, pname, idx = check_draw(model, x, fn, backward_fn)
            if comp not in worst or err > worst[comp].max_rel_error:
                worst[comp] = ComponentReport(comp, err, pname, tuple(int(i) for i in idx))
    return list(worst.values())
