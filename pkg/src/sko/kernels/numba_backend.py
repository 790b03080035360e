"""numba-jitted hot kernels; signatures match numpy_backend.

All loops are single-threaded and fastmath-free so results are deterministic
and ordering-compatible with the numpy fallback.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _phi_rolling(S, w, g, lam, out):
    B, H, N, _ = S.shape
    K = w.shape[1] - 1
    for b in range(B):
        for h in range(H):
            for i in range(N):
                for j in range(N):
                    x = S[b, h, i, j]
                    acc = w[h, 0] * g[h, 0]
                    if K >= 1:
                        acc += (w[h, 1] * g[h, 1]) * x
                    r_prev2 = 1.0
                    r_prev = x
                    for k in range(2, K + 1):
                        den = k + 2.0 * lam - 1.0
                        c1 = 2.0 * (k + lam - 1.0) / den
                        c2 = (k - 1.0) / den
                        r_k = c1 * (x * r_prev) - c2 * r_prev2
                        acc += (w[h, k] * g[h, k]) * r_k
                        r_prev2 = r_prev
                        r_prev = r_k
                    out[b, h, i, j] = acc


@njit(cache=True)
def _phi_stack(S, w, g, lam, out, stack):
    B, H, N, _ = S.shape
    K = w.shape[1] - 1
    for b in range(B):
        for h in range(H):
            for i in range(N):
                for j in range(N):
                    x = S[b, h, i, j]
                    acc = w[h, 0] * g[h, 0]
                    if K >= 1:
                        acc += (w[h, 1] * g[h, 1]) * x
                    r_prev2 = 1.0
                    r_prev = x
                    for k in range(2, K + 1):
                        den = k + 2.0 * lam - 1.0
                        c1 = 2.0 * (k + lam - 1.0) / den
                        c2 = (k - 1.0) / den
                        r_k = c1 * (x * r_prev) - c2 * r_prev2
                        stack[k - 2, b, h, i, j] = r_k
                        acc += (w[h, k] * g[h, k]) * r_k
                        r_prev2 = r_prev
                        r_prev = r_k
                    out[b, h, i, j] = acc


@njit(cache=True)
def _phi_backward(grad, S, stack, w, g, lam, dS, T):
    B, H, N, _ = S.shape
    K = w.shape[1] - 1
    for b in range(B):
        for h in range(H):
            for i in range(N):
                for j in range(N):
                    x = S[b, h, i, j]
                    go = grad[b, h, i, j]
                    T[h, 0] += go
                    d = 0.0
                    if K >= 1:
                        T[h, 1] += go * x
                        d = w[h, 1] * g[h, 1]  # R'_1 = 1
                    rp_prev2 = 0.0
                    rp_prev = 1.0
                    for k in range(2, K + 1):
                        den = k + 2.0 * lam - 1.0
                        c1 = 2.0 * (k + lam - 1.0) / den
                        c2 = (k - 1.0) / den
                        r_km1 = x if k == 2 else stack[k - 3, b, h, i, j]
                        rp_k = c1 * (r_km1 + x * rp_prev) - c2 * rp_prev2
                        T[h, k] += go * stack[k - 2, b, h, i, j]
                        d += (w[h, k] * g[h, k]) * rp_k
                        rp_prev2 = rp_prev
                        rp_prev = rp_k
                    dS[b, h, i, j] = go * d


@njit(cache=True)
def _adamw(p, grad, m, v, c1, c2, lr, beta1, beta2, eps, wd):
    n = p.shape[0]
    for i in range(n):
        gi = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= lr * ((mi * c1) / (np.sqrt(vi * c2) + eps) + wd * p[i])


def phi_rolling(S, w, g, lam):
    w = w.astype(S.dtype, copy=False)
    g = g.astype(S.dtype, copy=False)
    out = np.empty_like(S)
    _phi_rolling(S, w, g, float(lam), out)
    return out


def phi_stack(S, w, g, lam):
    w = w.astype(S.dtype, copy=False)
    g = g.astype(S.dtype, copy=False)
    K = w.shape[1] - 1
    out = np.empty_like(S)
    stack = np.empty((max(K - 1, 0),) + S.shape, dtype=S.dtype)
    _phi_stack(S, w, g, float(lam), out, stack)
    return out, stack


def phi_backward(grad, S, stack, w, g, lam):
    w = w.astype(S.dtype, copy=False)
    g = g.astype(S.dtype, copy=False)
    dS = np.empty_like(S)
    T = np.zeros((w.shape[0], w.shape[1]), dtype=S.dtype)
    _phi_backward(grad, S, stack, w, g, float(lam), dS, T)
    return dS, T


def adamw_update(p, grad, m, v, step, lr, beta1, beta2, eps, wd):
    # The jitted loop is 1-D; flat views alias the originals only for
    # contiguous arrays, so insist on that rather than silently copying.
    for a in (p, grad, m, v):
        if not a.flags.c_contiguous:
            raise ValueError("adamw_update requires C-contiguous arrays")
    c1 = 1.0 / (1.0 - beta1**step)
    c2 = 1.0 / (1.0 - beta2**step)
    _adamw(p.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
           c1, c2, lr, beta1, beta2, eps, wd)
