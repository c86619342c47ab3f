"""Slow, obviously-correct reference implementations used only by the tests."""

import numpy as np


def conv2d_loops(x, k, b, stride=(1, 1), padding=(0, 0)):
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c, h, w = xp.shape
    o, _, kh, kw = k.shape
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    out[bi, oi, i, j] = np.sum(patch * k[oi]) + (0.0 if b is None else b[oi])
    return out


def avgpool_loops(x, window, stride):
    wh, ww = window
    sh, sw = stride
    n, c, h, w = x.shape
    ho, wo = (h - wh) // sh + 1, (w - ww) // sw + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * sh:i * sh + wh, j * sw:j * sw + ww].mean(axis=(2, 3))
    return out


def adam_reference(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam, one scalar at a time."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    trace = []
    for step, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mhat = m[i] / (1 - b1 ** step)
            vhat = v[i] / (1 - b2 ** step)
            theta[i] -= lr * mhat / (vhat ** 0.5 + eps)
        trace.append(list(theta))
    return np.array(trace)


def whitened_eigenvalues(cov_a, cov_b):
    """Eigenvalues of C^-1/2 A C^-1/2 with C = A + B, via a dense symmetric solver."""
    c = cov_a + cov_b
    d, u = np.linalg.eigh(c)
    inv_sqrt = u @ np.diag(d ** -0.5) @ u.T
    return np.sort(np.linalg.eigvalsh(inv_sqrt @ cov_a @ inv_sqrt))[::-1]
