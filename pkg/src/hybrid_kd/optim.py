"""AdamW updates and patience-based early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamWState) -> None:
    """One in-place AdamW update of every array in ``params``.

    Weight decay is decoupled: the parameter is first shrunk by
    ``1 - lr * weight_decay`` and then moved by the bias-corrected Adam
    direction, so a zero gradient gives an exact multiplicative shrink.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * ((m / c1) / (np.sqrt(v / c2) + state.eps))


class AdamW:
    """Optimizer over a name -> Tensor mapping."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step({n: p.data for n, p in self.params.items()}, grads, self.state)


class EarlyStopper:
    """Stops after ``patience`` consecutive epochs without a strictly lower metric."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best_metric = float("inf")
        self.best_epoch = -1
        self.epochs_since_improvement = 0
        self.best_parameters: dict[str, np.ndarray] | None = None
        self._epoch = -1

    def update(self, metric: float, parameters: Mapping[str, np.ndarray] | None = None) -> bool:
        """Record one epoch's validation metric; returns True when training should stop."""
        if not np.isfinite(metric):
            raise ValueError(f"validation metric must be finite, got {metric}")
        self._epoch += 1
        if metric < self.best_metric:
            self.best_metric = float(metric)
            self.best_epoch = self._epoch
            self.epochs_since_improvement = 0
            if parameters is not None:
                self.best_parameters = {k: np.array(v, copy=True) for k, v in parameters.items()}
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience
