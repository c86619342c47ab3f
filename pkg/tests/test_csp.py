import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from hybrid_kd.csp import (
    csp_features,
    csp_from_covariances,
    fit_csp,
    fit_csp_lda_pipeline,
    fit_lda,
    lda_predict,
    normalized_covariance,
)
from hybrid_kd.data import SyntheticConfig, generate_synthetic_dataset, loso_split, stack
from hybrid_kd.losses import MI, SI

from oracles import whitened_eigenvalues


def toy_trials(rng, n_ch, n_trials, scales):
    mix = rng.standard_normal((n_ch, n_ch))
    return [mix @ (np.asarray(scales)[:, None] * rng.standard_normal((n_ch, 200))) for _ in range(n_trials)]


def class_cov(trials):
    return np.mean([normalized_covariance(x) for x in trials], axis=0)


def test_two_channel_hand_example():
    m = csp_from_covariances(np.diag([4.0, 1.0]), np.diag([1.0, 4.0]), n_per_side=1)
    np.testing.assert_allclose(m.eigenvalues, [0.8, 0.2], atol=1e-12)
    w = m.filters / np.linalg.norm(m.filters, axis=0)
    np.testing.assert_allclose(np.abs(w), np.eye(2), atol=1e-12)


def test_identical_sets_give_one_half(rng):
    trials = toy_trials(rng, 4, 10, [1, 2, 3, 4])
    m = fit_csp(trials, trials, n_per_side=2)
    np.testing.assert_allclose(m.eigenvalues, 0.5, atol=1e-6)


def test_requires_two_trials_per_class(rng):
    trials = toy_trials(rng, 3, 3, [1, 1, 1])
    with pytest.raises(ValueError):
        fit_csp(trials[:1], trials, n_per_side=1)


def test_rank_deficient_composite_is_regularized():
    a = np.diag([1.0, 0.0, 0.0])
    b = np.diag([0.0, 1.0, 0.0])
    m = csp_from_covariances(a, b, n_per_side=1)
    assert np.all(np.isfinite(m.filters))
    assert m.eigenvalues[0] == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=25)
@given(st.integers(2, 4), st.integers(0, 10_000))
def test_matches_whitened_oracle(n_ch, seed):
    rng = np.random.default_rng(seed)
    a = toy_trials(rng, n_ch, 5, rng.uniform(0.5, 3, n_ch))
    b = toy_trials(rng, n_ch, 5, rng.uniform(0.5, 3, n_ch))
    ca, cb = class_cov(a), class_cov(b)
    m = fit_csp(a, b, n_per_side=1)
    np.testing.assert_allclose(m.eigenvalues, whitened_eigenvalues(ca, cb), atol=1e-8)
    np.testing.assert_allclose(m.eigenvalues, scipy.linalg.eigh(ca, ca + cb, eigvals_only=True)[::-1], atol=1e-8)


@settings(max_examples=25)
@given(st.integers(2, 4), st.integers(0, 10_000))
def test_simultaneous_diagonalization(n_ch, seed):
    rng = np.random.default_rng(seed)
    ca = class_cov(toy_trials(rng, n_ch, 4, rng.uniform(0.5, 3, n_ch)))
    cb = class_cov(toy_trials(rng, n_ch, 4, rng.uniform(0.5, 3, n_ch)))
    m = csp_from_covariances(ca, cb, 1)
    w = m.filters
    da, db = w.T @ ca @ w, w.T @ cb @ w
    assert np.linalg.norm(w.T @ (ca + cb) @ w - np.eye(n_ch)) <= 1e-6
    assert np.abs(da - np.diag(np.diag(da))).max() <= 1e-6
    assert np.abs(db - np.diag(np.diag(db))).max() <= 1e-6
    np.testing.assert_allclose(np.diag(da) + np.diag(db), 1, atol=1e-6)
    lam = m.eigenvalues
    assert np.all(np.diff(lam) <= 0) and np.all((lam >= -1e-9) & (lam <= 1 + 1e-9))
    np.testing.assert_allclose(np.diag(db), 1 - lam, atol=1e-6)


@settings(max_examples=25)
@given(st.integers(2, 4), st.integers(0, 10_000))
def test_eigenvalue_complementarity_under_class_swap(n_ch, seed):
    rng = np.random.default_rng(seed)
    a = toy_trials(rng, n_ch, 4, rng.uniform(0.5, 3, n_ch))
    b = toy_trials(rng, n_ch, 4, rng.uniform(0.5, 3, n_ch))
    lam_ab = fit_csp(a, b, 1).eigenvalues
    lam_ba = fit_csp(b, a, 1).eigenvalues
    np.testing.assert_allclose(lam_ab + lam_ba[::-1], 1, atol=1e-6)


def test_features_length_and_scale_invariance(rng):
    a, b = toy_trials(rng, 8, 6, np.arange(1, 9)), toy_trials(rng, 8, 6, np.arange(8, 0, -1))
    m = fit_csp(a, b, n_per_side=3)
    trial = a[0]
    f = csp_features(trial, m)
    assert f.shape == (6,)
    for c in (1e-3, 0.5, 7.0, 1e4):
        np.testing.assert_allclose(csp_features(c * trial, m), f, atol=1e-9)
    np.testing.assert_array_equal(csp_features(trial, m), f)


def test_zero_trial_is_floored(rng):
    m = fit_csp(toy_trials(rng, 4, 3, [1, 2, 3, 4]), toy_trials(rng, 4, 3, [4, 3, 2, 1]), n_per_side=1)
    assert np.all(np.isfinite(csp_features(np.zeros((4, 50)), m)))


def test_lda_separated_gaussians():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-5, 1, 100), rng.normal(5, 1, 100)])[:, None]
    y = np.repeat([0, 1], 100)
    model = fit_lda(x, y)
    assert np.mean(lda_predict(model, x) == y) >= 0.99
    assert np.all(np.isfinite(model.scores(x)))


def test_lda_single_sample_bisector():
    model = fit_lda(np.array([[0.0, 0.0], [2.0, 4.0]]), [0, 1], shrinkage=1.0)
    # perpendicular bisector of (0,0)-(2,4) passes through (1,2) with normal (2,4)
    assert lda_predict(model, [[1.0, 2.0] + 1e-6 * np.array([2.0, 4.0])])[0] == 1
    assert lda_predict(model, [[1.0, 2.0] - 1e-6 * np.array([2.0, 4.0])])[0] == 0
    assert lda_predict(model, [[3.0, 1.5]])[0] == 1


def test_lda_training_point_gets_own_label(rng):
    x = np.concatenate([rng.normal(0, 0.1, (10, 3)), rng.normal(3, 0.1, (10, 3)), rng.normal(-3, 0.1, (10, 3))])
    y = np.repeat([0, 1, 2], 10)
    model = fit_lda(x, y)
    np.testing.assert_array_equal(lda_predict(model, x), y)


def test_lda_ties_go_to_lowest_class():
    model = fit_lda(np.array([[-1.0], [1.0]]), [3, 5], shrinkage=1.0)
    assert lda_predict(model, [[0.0]])[0] == 3


def test_lda_rejects_single_class():
    with pytest.raises(ValueError):
        fit_lda(np.zeros((4, 2)), [1, 1, 1, 1])


def test_pipeline_calibration_at_large_separation():
    data = generate_synthetic_dataset(SyntheticConfig(n_subjects=4, class_separation=5.0))
    train, _, test = loso_split(data, 0)
    pipe = fit_csp_lda_pipeline(train)
    x, paradigm, cls, _, _ = stack(test)
    x = x.astype(np.float64)
    within = np.concatenate([pipe.within[p].predict(x[paradigm == p]) == cls[paradigm == p] for p in (MI, SI)])
    assert within.mean() >= 0.9
    p_hat, c_hat, joint = pipe.predict(x)
    assert np.mean(p_hat == paradigm) >= 0.9
    assert np.mean((p_hat == paradigm) & (c_hat == cls)) <= np.mean(p_hat == paradigm)
