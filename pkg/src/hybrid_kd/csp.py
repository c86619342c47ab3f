"""Common spatial patterns with a shrinkage LDA classifier (the classical baseline)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import LabeledTrial, stack
from .losses import MI, N_MI, N_SI, SI

REG = 1e-8
VAR_FLOOR = 1e-12


@dataclass
class CspModel:
    filters: np.ndarray  # (channels, channels), columns sorted by eigenvalue, descending
    eigenvalues: np.ndarray
    n_per_side: int = 3

    def selected(self) -> np.ndarray:
        m = self.n_per_side
        return np.concatenate([self.filters[:, :m], self.filters[:, -m:]], axis=1)


def normalized_covariance(x: np.ndarray) -> np.ndarray:
    c = x @ x.T
    return c / np.trace(c)


def csp_from_covariances(cov_a: np.ndarray, cov_b: np.ndarray, n_per_side: int = 3) -> CspModel:
    """Solve cov_a w = lambda (cov_a + cov_b) w by whitening the composite covariance."""
    composite = cov_a + cov_b
    d, u = np.linalg.eigh(composite)
    if d.min() <= REG * max(d.max(), 1.0):
        composite = composite + REG * np.eye(len(d))
        d, u = np.linalg.eigh(composite)
        if d.min() <= 0:
            raise np.linalg.LinAlgError("composite covariance is singular after regularization")
    whiten = (u / np.sqrt(d)).T
    s = whiten @ cov_a @ whiten.T
    lam, v = np.linalg.eigh((s + s.T) / 2)
    order = np.argsort(lam)[::-1]
    return CspModel(whiten.T @ v[:, order], lam[order], n_per_side)


def fit_csp(trials_a: Sequence[np.ndarray], trials_b: Sequence[np.ndarray], n_per_side: int = 3) -> CspModel:
    if len(trials_a) < 2 or len(trials_b) < 2:
        raise ValueError("fit_csp needs at least two trials per class")
    cov_a = np.mean([normalized_covariance(np.asarray(x, dtype=np.float64)) for x in trials_a], axis=0)
    cov_b = np.mean([normalized_covariance(np.asarray(x, dtype=np.float64)) for x in trials_b], axis=0)
    return csp_from_covariances(cov_a, cov_b, n_per_side)


def csp_features(trial: np.ndarray, model: CspModel) -> np.ndarray:
    """Log of each selected filter's share of the total projected variance."""
    z = model.selected().T @ np.asarray(trial, dtype=np.float64)
    var = np.maximum(z.var(axis=-1), VAR_FLOOR)
    return np.log(np.maximum(var / var.sum(), VAR_FLOOR))


@dataclass
class LdaModel:
    classes: np.ndarray
    weights: np.ndarray  # (n_classes, d) one-vs-rest discriminants
    biases: np.ndarray
    shrinkage: float

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.weights.T + self.biases


def _shrunk_covariance(groups: Sequence[np.ndarray], gamma: float) -> np.ndarray:
    centered = np.concatenate([g - g.mean(axis=0) for g in groups])
    d = centered.shape[1]
    cov = centered.T @ centered / max(len(centered) - len(groups), 1)
    scale = np.trace(cov) / d
    if scale <= 0:
        scale = 1.0  # degenerate scatter (e.g. one sample per class): shrink toward identity
    return (1 - gamma) * cov + gamma * scale * np.eye(d)


def fit_lda(features, labels, shrinkage: float = 0.1) -> LdaModel:
    """One-vs-rest linear discriminants on a shrinkage-regularized pooled covariance."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("fit_lda needs at least two classes")
    w_rows, b_rows = [], []
    for c in classes:
        pos, neg = x[y == c], x[y != c]
        cov = _shrunk_covariance([pos, neg], shrinkage)
        if np.linalg.cond(cov) > 1e12:
            raise np.linalg.LinAlgError("within-class covariance is singular after shrinkage")
        mu_p, mu_n = pos.mean(axis=0), neg.mean(axis=0)
        w = np.linalg.solve(cov, mu_p - mu_n)
        w_rows.append(w)
        b_rows.append(-w @ (mu_p + mu_n) / 2)
    return LdaModel(classes, np.array(w_rows), np.array(b_rows), shrinkage)


def lda_predict(model: LdaModel, features) -> np.ndarray:
    """Argmax of the discriminant scores; ties go to the lowest class index."""
    return model.classes[np.argmax(model.scores(features), axis=-1)]


@dataclass
class OneVsRestCsp:
    """Per-class CSP (class vs rest) feeding one LDA over the concatenated features."""

    csps: list[CspModel]
    lda: LdaModel

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([np.array([csp_features(t, m) for t in x]) for m in self.csps], axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return lda_predict(self.lda, self.features(x))


def fit_csp_lda(x: np.ndarray, y: np.ndarray, n_per_side: int = 3, shrinkage: float = 0.1) -> OneVsRestCsp:
    classes = np.unique(y)
    if len(classes) == 2:
        csps = [fit_csp(x[y == classes[0]], x[y == classes[1]], n_per_side)]
    else:
        csps = [fit_csp(x[y == c], x[y != c], n_per_side) for c in classes]
    model = OneVsRestCsp(csps, None)
    model.lda = fit_lda(model.features(x), y, shrinkage)
    return model


@dataclass
class CspLdaPipeline:
    """Paradigm classifier, then a within-paradigm classifier picked by its decision."""

    paradigm: OneVsRestCsp
    within: dict[int, OneVsRestCsp]

    def predict(self, x: np.ndarray):
        """Returns (paradigm, within-paradigm class, joint 8-way label)."""
        paradigm = self.paradigm.predict(x)
        cls = np.zeros(len(x), dtype=np.int64)
        for p in (MI, SI):
            sel = paradigm == p
            if np.any(sel):
                cls[sel] = self.within[p].predict(x[sel])
        joint = np.where(paradigm == MI, cls, N_MI + cls)
        return paradigm, cls, joint


def fit_csp_lda_pipeline(train: Sequence[LabeledTrial], n_per_side: int = 3, shrinkage: float = 0.1) -> CspLdaPipeline:
    x, paradigm, cls, _, _ = stack(train)
    x = x.astype(np.float64)
    for p, k in ((MI, N_MI), (SI, N_SI)):
        if len(np.unique(cls[paradigm == p])) != k:
            raise ValueError(f"training set must contain every class of paradigm {p}")
    para = fit_csp_lda(x, paradigm, n_per_side, shrinkage)
    within = {p: fit_csp_lda(x[paradigm == p], cls[paradigm == p], n_per_side, shrinkage) for p in (MI, SI)}
    return CspLdaPipeline(para, within)
