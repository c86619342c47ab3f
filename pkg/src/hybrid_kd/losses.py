"""Cross-entropy, the gated hierarchical teacher loss and the distillation loss.

Probability inputs are Tensors of shape (classes,) for a single trial or
(batch, classes) for a mini-batch.  Batched losses return the batch mean.

Joint label space: indices 0-2 are the motor-imagery classes, 3-7 the
speech-imagery classes.  Paradigm index 0 is MI, 1 is SI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12
N_MI = 3
N_SI = 5
N_JOINT = N_MI + N_SI
MI, SI = 0, 1


def joint_label(paradigm, class_index):
    """Map (paradigm, within-paradigm class) to the 8-way joint index."""
    return np.where(np.asarray(paradigm) == MI, class_index, N_MI + np.asarray(class_index))


@dataclass(frozen=True)
class DistillationConfig:
    temperature: float = 4.0
    lam: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def _one_hot(labels, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes: {labels}")
    return np.eye(n_classes, dtype=dtype)[labels]


def soft_cross_entropy(probs: Tensor, targets) -> Tensor:
    """Per-sample ``-sum_c t_c log max(q_c, 1e-12)`` (shape drops the class axis)."""
    probs = T.as_tensor(probs)
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise ValueError(f"targets {targets.shape} do not match probabilities {probs.shape}")
    return -(T.log(probs, PROB_FLOOR) * targets).sum(axis=-1)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """``-log max(probs[label], 1e-12)``; per sample for batched input."""
    probs = T.as_tensor(probs)
    return soft_cross_entropy(probs, _one_hot(labels, probs.shape[-1], probs.dtype))


def kl_divergence(p, q: Tensor) -> Tensor:
    """``sum_i p_i ln(p_i / q_i)`` along the last axis, with 0 ln 0 = 0 and q floored.

    ``p`` is treated as a constant target.
    """
    q = T.as_tensor(q)
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=q.dtype)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: arity mismatch {p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    return plogp - (T.log(q, PROB_FLOOR) * p).sum(axis=-1)


@dataclass
class HierarchicalLossTerms:
    """Per-sample terms of the gated teacher loss plus the batch-mean total."""

    l_shared: Tensor
    l_mi: Tensor
    l_si: Tensor
    p_mi: Tensor
    p_si: Tensor
    per_sample: Tensor
    total: Tensor


def branch_targets(paradigm, class_index, n_classes: int, branch: int, dtype=np.float64) -> np.ndarray:
    """Targets for one branch: one-hot on its own paradigm, uniform on the other one."""
    paradigm = np.atleast_1d(np.asarray(paradigm))
    class_index = np.atleast_1d(np.asarray(class_index))
    out = np.full((paradigm.size, n_classes), 1.0 / n_classes, dtype=dtype)
    own = paradigm == branch
    if np.any(class_index[own] >= n_classes) or np.any(class_index[own] < 0):
        raise ValueError(f"class index out of range for a {n_classes}-class branch")
    out[own] = 0.0
    out[np.flatnonzero(own), class_index[own]] = 1.0
    return out


def hierarchical_loss(shared_probs: Tensor, mi_probs: Tensor, si_probs: Tensor, paradigm, class_index) -> HierarchicalLossTerms:
    """``L_sh + p_MI * L_MI + p_SI * L_SI`` with both branch losses always evaluated.

    The branch that does not own the trial's paradigm is trained toward the
    uniform distribution over its classes.
    """
    shared_probs, mi_probs, si_probs = (T.as_tensor(t) for t in (shared_probs, mi_probs, si_probs))
    single = shared_probs.data.ndim == 1
    if single:
        shared_probs, mi_probs, si_probs = (t.reshape(1, -1) for t in (shared_probs, mi_probs, si_probs))
    for t, n, what in ((shared_probs, 2, "shared"), (mi_probs, N_MI, "MI"), (si_probs, N_SI, "SI")):
        if t.shape[-1] != n:
            raise ValueError(f"{what} probabilities must have {n} entries, got {t.shape[-1]}")
    paradigm = np.atleast_1d(np.asarray(paradigm))
    class_index = np.atleast_1d(np.asarray(class_index))
    dtype = shared_probs.dtype
    l_sh = cross_entropy(shared_probs, paradigm)
    l_mi = soft_cross_entropy(mi_probs, branch_targets(paradigm, class_index, N_MI, MI, dtype))
    l_si = soft_cross_entropy(si_probs, branch_targets(paradigm, class_index, N_SI, SI, dtype))
    p_mi = shared_probs[:, MI]
    p_si = shared_probs[:, SI]
    per_sample = l_sh + p_mi * l_mi + p_si * l_si
    total = per_sample.mean()
    return HierarchicalLossTerms(l_sh, l_mi, l_si, p_mi, p_si, per_sample, total)


def distillation_loss(student_logits: Tensor, teacher_soft, labels, config: DistillationConfig) -> Tensor:
    """``tau^2 * KL(teacher_soft || softmax(s / tau)) + lambda * CE(softmax(s), y)``, batch mean.

    ``teacher_soft`` is the teacher's composite distribution already
    produced at temperature tau; no gradient flows into it.
    """
    student_logits = T.as_tensor(student_logits)
    tau = config.temperature
    teacher_soft = np.asarray(teacher_soft.data if isinstance(teacher_soft, Tensor) else teacher_soft)
    soft_student = T.tempered_softmax(student_logits, tau)
    kd = kl_divergence(teacher_soft, soft_student) * (tau * tau)
    ce = cross_entropy(T.tempered_softmax(student_logits, 1.0), labels)
    return (kd + ce * config.lam).mean()
