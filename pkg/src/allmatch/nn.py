"""Dense encoder + bias-free linear classifier with hand-written backprop.

Parameters live in a flat ``dict[str, ndarray]`` (``enc0.W``, ``enc0.b``, ...,
``cls.W``) so the optimizer, the EMA shadow and the checkpoint code can all
walk the same mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class StaleCacheError(RuntimeError):
    """Raised when ``backward`` receives a cache that no longer matches the model."""


@dataclass
class Mlp:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0

    @classmethod
    def init(cls, input_dim, hidden_dims, num_classes, rng):
        """He-uniform hidden layers, uniform(+-1/sqrt(d)) classifier."""
        hidden_dims = tuple(int(h) for h in hidden_dims)
        params = {}
        fan_in = input_dim
        for i, width in enumerate(hidden_dims):
            bound = math.sqrt(6.0 / fan_in)
            params[f"enc{i}.W"] = rng.uniform(-bound, bound, size=(width, fan_in))
            params[f"enc{i}.b"] = np.zeros(width)
            fan_in = width
        bound = 1.0 / math.sqrt(fan_in)
        params["cls.W"] = rng.uniform(-bound, bound, size=(num_classes, fan_in))
        return cls(input_dim, hidden_dims, num_classes, params)

    @property
    def feature_dim(self):
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @property
    def num_layers(self):
        return len(self.hidden_dims)

    def copy(self):
        return Mlp(self.input_dim, self.hidden_dims, self.num_classes,
                   {k: v.copy() for k, v in self.params.items()}, self.version)

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: list[np.ndarray]  # input to each encoder layer
    pre: list[np.ndarray]     # pre-activations of each encoder layer
    features: np.ndarray


def _check_inputs(params, inputs, input_dim):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != input_dim or x.shape[0] < 1:
        raise ValueError(
            f"expected inputs of shape (n >= 1, {input_dim}), got {x.shape}")
    return x


def forward(model: Mlp, inputs, keep_cache=True, params=None):
    """Return ``(features, logits, cache)``.

    ``params`` overrides ``model.params`` (used to evaluate the EMA shadow with the
    same architecture). ``cache`` is None when ``keep_cache`` is false.
    """
    params = model.params if params is None else params
    h = _check_inputs(params, inputs, model.input_dim)
    layer_inputs, pres = [], []
    for i in range(model.num_layers):
        pre = h @ params[f"enc{i}.W"].T + params[f"enc{i}.b"]
        if keep_cache:
            layer_inputs.append(h)
            pres.append(pre)
        h = np.maximum(pre, 0.0)
    logits = h @ params["cls.W"].T
    cache = None
    if keep_cache:
        cache = ForwardCache(id(model), model.version, layer_inputs, pres, h)
    return h, logits, cache


def backward(model: Mlp, cache: ForwardCache | None, logit_grads):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
    if cache is None:
        raise StaleCacheError("backward called without a forward cache")
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache is stale: parameters changed since forward")
    g = np.asarray(logit_grads, dtype=np.float64)
    if g.shape != (cache.features.shape[0], model.num_classes):
        raise ValueError(f"logit_grads shape {g.shape} does not match cache")
    grads = {"cls.W": g.T @ cache.features}
    dh = g @ model.params["cls.W"]
    for i in reversed(range(model.num_layers)):
        dpre = dh * (cache.pre[i] > 0.0)
        grads[f"enc{i}.W"] = dpre.T @ cache.inputs[i]
        grads[f"enc{i}.b"] = dpre.sum(axis=0)
        if i > 0:
            dh = dpre @ model.params[f"enc{i}.W"]
    return grads


def cosine_lr(base_lr, k, total_iterations):
    """``base_lr * cos(7*pi*k / (16*total))``; ends near 0.195 * base_lr."""
    return base_lr * math.cos(7.0 * math.pi * k / (16.0 * total_iterations))


@dataclass
class SgdOptimizer:
    base_lr: float
    total_iterations: int
    momentum: float = 0.9
    weight_decay: float = 0.0
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self):
        return cosine_lr(self.base_lr, self.iteration, self.total_iterations)

    def step(self, model: Mlp, grads):
        if self.iteration >= self.total_iterations:
            raise RuntimeError(
                f"optimizer exhausted: iteration {self.iteration} >= {self.total_iterations}")
        lr = self.lr
        for name, p in model.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v
        self.iteration += 1
        model.touch()
        return model


def sgd_step(optimizer: SgdOptimizer, model: Mlp, grads):
    return optimizer.step(model, grads)


@dataclass
class EmaModel:
    shadow: dict[str, np.ndarray]
    decay: float = 0.999

    @classmethod
    def from_model(cls, model: Mlp, decay=0.999):
        return cls({k: v.copy() for k, v in model.params.items()}, decay)

    def update(self, model: Mlp):
        d = self.decay
        for name, p in model.params.items():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ValueError(f"shadow shape mismatch for {name}")
            self.shadow[name] = d * s + (1.0 - d) * p
        return self


def ema_update(ema: EmaModel, model: Mlp):
    return ema.update(model)


def classifier_weight_norms(ema: EmaModel):
    """Row-wise L2 norms of the EMA classifier matrix, one per class."""
    return np.sqrt(np.sum(ema.shadow["cls.W"] ** 2, axis=1))
