"""Hot inner loops, each in two flavours: a numba ``@njit`` kernel and a numpy path.

The numba path is used when numba imports and ``LATENT_AUGMENT_NUMBA`` is not
set to ``0``. Both paths compute the same arithmetic in the same order; they can
differ only in the last ulp of transcendental functions and reduction order.
``benchmarks/bench_kernels.py`` times one against the other.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_FLAG = os.environ.get("LATENT_AUGMENT_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


# --------------------------------------------------------------------- adam

def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update on flat float64 arrays. ``bc*`` are ``1 - beta**step``."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= (lr * (m / bc1)) / (np.sqrt(v / bc2) + eps)


def _adam_update_loop(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= (lr * (mi / bc1)) / (math.sqrt(vi / bc2) + eps)


# ------------------------------------------------------------ softmax / CE

def softmax_xent_np(logits, labels, weights):
    """Weighted softmax cross entropy.

    Returns ``(loss, grad, probs)`` with ``loss = sum_i w_i * -log p_i[y_i]`` and
    ``grad_i = w_i * (p_i - onehot(y_i))``.
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    rows = np.arange(n)
    nll = np.log(denom[:, 0]) - shifted[rows, labels]
    loss = float(np.dot(weights, nll))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad *= weights[:, None]
    return loss, grad, probs


def _softmax_xent_loop(logits, labels, weights):
    n, k = logits.shape
    probs = np.empty((n, k))
    grad = np.empty((n, k))
    loss = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(k):
            e = math.exp(logits[i, j] - mx)
            probs[i, j] = e
            s += e
        for j in range(k):
            probs[i, j] /= s
        y = labels[i]
        loss += weights[i] * (math.log(s) - (logits[i, y] - mx))
        for j in range(k):
            grad[i, j] = weights[i] * probs[i, j]
        grad[i, y] = weights[i] * (probs[i, y] - 1.0)
    return loss, grad, probs


# --------------------------------------------------------------- DDIM step

def ddim_update_np(z, eps_hat, sqrt_ab_t, sqrt_1m_ab_t, sqrt_ab_prev, dir_coef, sigma, noise):
    x0 = (z - sqrt_1m_ab_t * eps_hat) / sqrt_ab_t
    out = sqrt_ab_prev * x0 + dir_coef * eps_hat
    if sigma != 0.0:
        out += sigma * noise
    return out


def _ddim_update_loop(z, eps_hat, sqrt_ab_t, sqrt_1m_ab_t, sqrt_ab_prev, dir_coef, sigma, noise):
    n, c = z.shape
    out = np.empty((n, c))
    for i in range(n):
        for j in range(c):
            x0 = (z[i, j] - sqrt_1m_ab_t * eps_hat[i, j]) / sqrt_ab_t
            val = sqrt_ab_prev * x0 + dir_coef * eps_hat[i, j]
            if sigma != 0.0:
                val += sigma * noise[i, j]
            out[i, j] = val
    return out


# ------------------------------------------------------------------ Jacobi

def _rotation(app, aqq, apq):
    theta = (aqq - app) / (2.0 * apq)
    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
    if theta < 0.0:
        t = -t
    c = 1.0 / math.sqrt(t * t + 1.0)
    return c, t * c


def jacobi_eigh_np(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns unsorted ``(eigenvalues, eigenvectors)`` with eigenvectors in columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                c, s = _rotation(a[p, p], a[q, q], apq)
                colp, colq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp, rowq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                vp, vq = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    return np.diag(a).copy(), vecs


def _jacobi_eigh_loop(a_in, tol, max_sweeps):
    n = a_in.shape[0]
    a = a_in.copy()
    vecs = np.eye(n)
    scale = 1e-300
    for i in range(n):
        for j in range(n):
            if abs(a[i, j]) > scale:
                scale = abs(a[i, j])
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        if math.sqrt(off) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = vecs[k, p]
                    vkq = vecs[k, q]
                    vecs[k, p] = c * vkp - s * vkq
                    vecs[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, vecs


# ------------------------------------------------------------- selection

if HAVE_NUMBA:
    adam_update_nb = njit(cache=True, nogil=True)(_adam_update_loop)
    softmax_xent_nb = njit(cache=True, nogil=True)(_softmax_xent_loop)
    ddim_update_nb = njit(cache=True, nogil=True)(_ddim_update_loop)
    _jacobi_nb = njit(cache=True, nogil=True)(_jacobi_eigh_loop)

    def jacobi_eigh_nb(a, tol=1e-14, max_sweeps=100):
        return _jacobi_nb(np.ascontiguousarray(a, dtype=np.float64), tol, max_sweeps)
else:  # pragma: no cover
    adam_update_nb = softmax_xent_nb = ddim_update_nb = jacobi_eigh_nb = None


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


if USE_NUMBA:
    adam_update = adam_update_nb
    ddim_update = ddim_update_nb
    jacobi_eigh = jacobi_eigh_nb

    def softmax_xent(logits, labels, weights):
        loss, grad, probs = softmax_xent_nb(
            np.ascontiguousarray(logits, dtype=np.float64),
            np.ascontiguousarray(labels, dtype=np.int64),
            np.ascontiguousarray(weights, dtype=np.float64),
        )
        return float(loss), grad, probs
else:
    adam_update = adam_update_np
    softmax_xent = softmax_xent_np
    ddim_update = ddim_update_np
    jacobi_eigh = jacobi_eigh_np
