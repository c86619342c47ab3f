"""Finite-difference audits of every differentiable op and of both training losses."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .losses import DistillationConfig, distillation_loss, hierarchical_loss
from .models import Module, StudentModel, TeacherModel, small_arch
from .tensor import Tensor, avgpool2d, conv2d, dense, elu, grad_check, no_grad, tempered_softmax

TOLERANCE = 1e-4


def weighted_sum(y: Tensor, seed: int = 0) -> Tensor:
    # a fixed random projection makes every output entry matter to the gradient
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return (y * w).sum()


# name -> (input factory, scalar function of the inputs)
OP_CASES: dict[str, tuple[Callable, Callable]] = {
    "conv2d_direct": (lambda r: [r.standard_normal((2, 2, 3, 9)), r.standard_normal((3, 2, 2, 3)), r.standard_normal(3)],
                      lambda a, k, b: weighted_sum(conv2d(a, k, b, (1, 2), (1, 1), method="direct"))),
    "conv2d_direct_unit_stride": (lambda r: [r.standard_normal((2, 2, 3, 9)), r.standard_normal((3, 2, 2, 3)), r.standard_normal(3)],
                                  lambda a, k, b: weighted_sum(conv2d(a, k, b, (1, 1), (0, 1), method="direct"))),
    "conv2d_fft": (lambda r: [r.standard_normal((2, 1, 4, 20)), r.standard_normal((3, 1, 3, 7)), r.standard_normal(3)],
                   lambda a, k, b: weighted_sum(conv2d(a, k, b, (1, 1), (0, 2), method="fft"))),
    "avgpool2d": (lambda r: [r.standard_normal((2, 3, 2, 10))],
                  lambda a: weighted_sum(avgpool2d(a, (1, 3), (1, 3)))),
    "elu": (lambda r: [r.standard_normal((3, 7)) * 2],
            lambda a: weighted_sum(elu(a))),
    "tempered_softmax": (lambda r: [r.standard_normal((4, 5)) * 3],
                         lambda a: weighted_sum(tempered_softmax(a, 2.5))),
    "dense": (lambda r: [r.standard_normal((4, 6)), r.standard_normal((3, 6)), r.standard_normal(3)],
              lambda a, w, b: weighted_sum(dense(a, w, b))),
    "log": (lambda r: [r.uniform(0.1, 3.0, (3, 4))],
            lambda a: weighted_sum(T.log(a, 1e-12))),
    "add_sub_mul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))],
                    lambda a, b: weighted_sum(a * b - (a + b) * a)),
    "mean_reshape_take_concat": (lambda r: [r.standard_normal((2, 3, 1, 4))],
                                 lambda a: weighted_sum(T.concat([a.mean(axis=(2, 3)).reshape(2, 3)[:, 0:1], a[:, 1, 0, :]], axis=-1))),
}


def check_ops(n_instances: int = 20) -> dict[str, float]:
    """Worst relative error per op over ``n_instances`` random inputs (float64)."""
    out = {}
    for name, (make, fn) in OP_CASES.items():
        out[name] = max(grad_check(fn, make(np.random.default_rng(seed))) for seed in range(n_instances))
    return out


def model_grad_check(model: Module, loss_fn: Callable[[], Tensor], rng: np.random.Generator,
                     entries_per_param: int = 3, eps: float = 1e-5) -> float:
    """Autodiff vs central differences on a random subset of every parameter tensor."""
    params = model.parameters()
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for p in params.values():
        for f in rng.choice(p.data.size, min(entries_per_param, p.data.size), replace=False):
            pos = np.unravel_index(f, p.shape)
            orig = p.data[pos]
            with no_grad():
                p.data[pos] = orig + eps
                up = float(loss_fn().data)
                p.data[pos] = orig - eps
                down = float(loss_fn().data)
            p.data[pos] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(p.grad[pos] - fd) / max(1.0, abs(fd)))
    return worst


def check_hierarchical_loss(n_instances: int = 20, batch: int = 3) -> float:
    arch = small_arch()
    worst = 0.0
    for seed in range(n_instances):
        rng = np.random.default_rng(seed)
        model = TeacherModel(seed=seed, arch=arch, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, 1, arch.n_channels, arch.n_samples)))
        paradigm, cls = rng.integers(0, 2, batch), rng.integers(0, 3, batch)

        def loss():
            out = model.forward(x)
            return hierarchical_loss(out.paradigm_probs, out.mi_probs, out.si_probs, paradigm, cls).total

        worst = max(worst, model_grad_check(model, loss, rng))
    return worst


def check_distillation_loss(n_instances: int = 20, batch: int = 3, config: DistillationConfig = DistillationConfig()) -> float:
    arch = small_arch()
    worst = 0.0
    for seed in range(n_instances):
        rng = np.random.default_rng(seed)
        teacher = TeacherModel(seed=100 + seed, arch=arch, dtype=np.float64)
        student = StudentModel(seed=seed, arch=arch, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, 1, arch.n_channels, arch.n_samples)))
        with no_grad():
            soft = teacher.forward(x, config.temperature).composite8.data
        labels = rng.integers(0, 8, batch)

        def loss():
            logits, _ = student.forward(x)
            return distillation_loss(logits, soft, labels, config)

        worst = max(worst, model_grad_check(student, loss, rng))
    return worst


def run_all(n_instances: int = 20) -> dict[str, float]:
    report = check_ops(n_instances)
    report["hierarchical_loss_end_to_end"] = check_hierarchical_loss(n_instances)
    report["distillation_loss_end_to_end"] = check_distillation_loss(n_instances)
    return report
