import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hybrid_kd import tensor as T
from hybrid_kd.losses import (
    DistillationConfig,
    cross_entropy,
    distillation_loss,
    hierarchical_loss,
    joint_label,
    kl_divergence,
)
from hybrid_kd.tensor import Tensor, grad_check, tempered_softmax

logits8 = arrays(np.float64, 8, elements=st.floats(-8, 8, allow_nan=False))


def probs(*values):
    return Tensor(np.array(values, dtype=float))


def test_cross_entropy_examples():
    assert cross_entropy(probs(0, 1, 0), 1).data == 0.0
    assert math.isclose(float(cross_entropy(probs(*[0.2] * 5), 3).data), math.log(5), rel_tol=1e-12)
    assert math.isclose(float(cross_entropy(probs(0.75, 0.25), 1).data), math.log(4), rel_tol=1e-12)


def test_cross_entropy_floor_and_range():
    assert math.isclose(float(cross_entropy(probs(1.0, 0.0), 1).data), -math.log(1e-12))
    with pytest.raises(ValueError):
        cross_entropy(probs(0.5, 0.5), 2)


@pytest.mark.parametrize("c", [2, 3, 5, 8])
def test_cross_entropy_uniform_is_log_c(c):
    for label in range(c):
        assert abs(float(cross_entropy(Tensor(np.full(c, 1.0 / c)), label).data) - math.log(c)) <= 1e-9


def test_kl_examples():
    assert float(kl_divergence(np.array([0.3, 0.7]), probs(0.3, 0.7)).data) == pytest.approx(0.0, abs=1e-15)
    assert float(kl_divergence(np.array([1.0, 0.0]), probs(0.5, 0.5)).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(kl_divergence(np.array([0.75, 0.25]), probs(0.25, 0.75)).data) == pytest.approx(0.5 * math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        kl_divergence(np.array([0.5, 0.5]), probs(0.2, 0.3, 0.5))


@given(arrays(np.float64, 5, elements=st.floats(0.01, 1)), arrays(np.float64, 5, elements=st.floats(0.01, 1)))
def test_kl_non_negative(a, b):
    assert float(kl_divergence(a / a.sum(), Tensor(b / b.sum())).data) >= -1e-12


def test_hierarchical_gate_mi_certain():
    t = hierarchical_loss(probs(1, 0), probs(0.2, 0.5, 0.3), probs(*[0.2] * 5), 0, 1)
    assert float(t.total.data) - float(t.l_shared.data[0]) - float(t.l_mi.data[0]) == 0.0


def test_hierarchical_gate_si_certain():
    t = hierarchical_loss(probs(0, 1), probs(0.2, 0.5, 0.3), probs(0.1, 0.1, 0.6, 0.1, 0.1), 1, 2)
    assert float(t.total.data) - float(t.l_shared.data[0]) - float(t.l_si.data[0]) == 0.0


def test_hierarchical_even_gate_averages_branches():
    mi = probs(1 / 3, 1 / 3, 1 / 3)
    si = probs(*[0.2] * 5)
    t = hierarchical_loss(probs(0.5, 0.5), mi, si, 0, 0)
    ell_m, ell_s = float(t.l_mi.data[0]), float(t.l_si.data[0])
    assert math.isclose(float(t.total.data), math.log(2) + 0.5 * ell_m + 0.5 * ell_s, rel_tol=1e-12)


def test_hierarchical_worked_example():
    # branch outputs chosen so that L_M = 1 and L_S = 2
    mi = probs(math.exp(-1.0), 1 - math.exp(-1.0), 0.0)
    q = np.full(5, math.exp(-2.0))
    q[0] = math.exp(-10.0 - np.log(q[1:]).sum())
    t = hierarchical_loss(probs(0.8, 0.2), mi, Tensor(q), 0, 0)
    assert float(t.l_mi.data[0]) == pytest.approx(1.0, abs=1e-12)
    assert float(t.l_si.data[0]) == pytest.approx(2.0, abs=1e-12)
    assert float(t.total.data) == pytest.approx(0.22314 + 0.8 + 0.4, abs=1e-5)
    assert float(t.total.data) == pytest.approx(-math.log(0.8) + 0.8 * 1.0 + 0.2 * 2.0, abs=1e-12)


def test_hierarchical_off_paradigm_branch_targets_uniform():
    si = probs(0.5, 0.2, 0.1, 0.1, 0.1)
    t = hierarchical_loss(probs(0.6, 0.4), probs(0.7, 0.2, 0.1), si, 0, 0)
    assert float(t.l_si.data[0]) == pytest.approx(-np.mean(np.log(si.data)), abs=1e-12)


def test_hierarchical_arity_checked():
    with pytest.raises(ValueError):
        hierarchical_loss(probs(0.5, 0.5), probs(0.5, 0.5), probs(*[0.2] * 5), 0, 0)


def test_hierarchical_total_is_exact_composition(rng):
    z = rng.standard_normal((6, 10))
    sh, mi, si = (tempered_softmax(Tensor(z[:, a:b])) for a, b in ((0, 2), (2, 5), (5, 10)))
    paradigm, cls = np.array([0, 1, 0, 1, 1, 0]), np.array([2, 4, 0, 1, 0, 1])
    t = hierarchical_loss(sh, mi, si, paradigm, cls)
    per = t.l_shared.data + t.p_mi.data * t.l_mi.data + t.p_si.data * t.l_si.data
    np.testing.assert_array_equal(t.per_sample.data, per)
    np.testing.assert_allclose(t.p_mi.data + t.p_si.data, 1, atol=1e-12)
    assert float(t.total.data) == pytest.approx(per.mean(), abs=1e-15)


def test_hierarchical_gradient_wrt_shared_logits(rng):
    paradigm, cls = np.array([0, 1, 1, 0]), np.array([1, 3, 0, 2])
    other = rng.standard_normal((4, 8))

    def f(shared_logits, rest):
        return hierarchical_loss(tempered_softmax(shared_logits), tempered_softmax(rest[:, :3]),
                                 tempered_softmax(rest[:, 3:]), paradigm, cls).total

    for seed in range(20):
        r = np.random.default_rng(seed)
        assert grad_check(f, [r.standard_normal((4, 2)) * 2, other]) <= 1e-4


def test_distillation_identical_distributions_leave_ce_only():
    cfg = DistillationConfig(temperature=3.0, lam=0.7)
    z = np.array([0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.2, 1.1])
    teacher = tempered_softmax(Tensor(z), 3.0).data
    loss = float(distillation_loss(Tensor(z[None]), teacher[None], [4], cfg).data)
    ce = float(cross_entropy(tempered_softmax(Tensor(z)), 4).data)
    assert loss == pytest.approx(0.7 * ce, abs=1e-12)


def test_distillation_uniform_teacher_and_student():
    for lam in (0.0, 1.0, 2.5):
        loss = distillation_loss(Tensor(np.zeros((1, 8))), np.full((1, 8), 1 / 8), [5], DistillationConfig(4.0, lam))
        assert float(loss.data) == pytest.approx(lam * math.log(8), abs=1e-12)
    assert math.log(8) == pytest.approx(2.07944, abs=1e-5)


def test_distillation_lambda_zero_pulls_student_to_teacher(rng):
    teacher = tempered_softmax(Tensor(rng.standard_normal((1, 8)) * 2), 2.0).data
    z = Tensor(np.zeros((1, 8)), requires_grad=True)
    cfg = DistillationConfig(2.0, 0.0)
    first = float(distillation_loss(z, teacher, [0], cfg).data)
    for _ in range(1000):
        z.grad = None
        T.backward(distillation_loss(z, teacher, [0], cfg))
        z.data -= 2.0 * z.grad
    assert float(distillation_loss(z, teacher, [0], cfg).data) < 1e-3 * first


def test_distillation_rejects_bad_config():
    with pytest.raises(ValueError):
        DistillationConfig(temperature=0.0)
    with pytest.raises(ValueError):
        DistillationConfig(lam=-1.0)


@given(logits8, logits8, st.integers(0, 7), st.floats(0.5, 8), st.floats(0, 3))
def test_distillation_at_least_weighted_ce(s, t, label, tau, lam):
    cfg = DistillationConfig(tau, lam)
    teacher = tempered_softmax(Tensor(t), tau).data
    loss = float(distillation_loss(Tensor(s[None]), teacher[None], [label], cfg).data)
    ce = float(cross_entropy(tempered_softmax(Tensor(s)), label).data)
    assert loss >= lam * ce - 1e-9


@given(logits8, logits8, st.floats(-50, 50))
def test_distillation_shift_invariant(s, t, c):
    cfg = DistillationConfig(4.0, 1.0)
    teacher = tempered_softmax(Tensor(t), 4.0).data[None]
    a = float(distillation_loss(Tensor(s[None]), teacher, [3], cfg).data)
    b = float(distillation_loss(Tensor(s[None] + c), teacher, [3], cfg).data)
    assert abs(a - b) <= 1e-9


def test_distillation_gradient(rng):
    cfg = DistillationConfig(4.0, 1.0)
    teacher = tempered_softmax(Tensor(rng.standard_normal((3, 8))), 4.0).data
    for seed in range(20):
        s = np.random.default_rng(seed).standard_normal((3, 8))
        assert grad_check(lambda z: distillation_loss(z, teacher, [0, 4, 7], cfg), [s]) <= 1e-4


def test_joint_label_ordering():
    np.testing.assert_array_equal(joint_label([0, 0, 0, 1, 1, 1, 1, 1], [0, 1, 2, 0, 1, 2, 3, 4]), np.arange(8))
