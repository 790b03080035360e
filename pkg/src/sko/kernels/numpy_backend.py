"""Pure-numpy reference implementations of the hot kernels.

Same signatures as the numba backend. Expression structure mirrors the jit
loops so the two paths agree to rounding.
"""

import numpy as np


def recurrence_coeffs_scalar(k: int, lam: float) -> tuple[float, float]:
    den = k + 2.0 * lam - 1.0
    return 2.0 * (k + lam - 1.0) / den, (k - 1.0) / den


def phi_rolling(S, w, g, lam):
    """Gated polynomial kernel, forward only.

    S: (B, H, N, N) cosine similarities in [-1, 1]; w, g: (H, K+1).
    Keeps only the two-term recurrence window; returns phi with S's shape.
    """
    K = w.shape[1] - 1
    coeff = w * g
    out = np.broadcast_to(coeff[:, 0, None, None], S.shape).copy()
    if K >= 1:
        out += coeff[:, 1, None, None] * S
    r_prev2, r_prev = None, S
    for k in range(2, K + 1):
        c1, c2 = recurrence_coeffs_scalar(k, lam)
        if k == 2:
            r_k = c1 * (S * r_prev) - c2  # R_0 is the all-ones matrix
        else:
            r_k = c1 * (S * r_prev) - c2 * r_prev2
        out += coeff[:, k, None, None] * r_k
        r_prev2, r_prev = r_prev, r_k
    return out


def phi_stack(S, w, g, lam):
    """Forward pass that retains R_2..R_K for backward.

    Returns (phi, stack) with stack shape (max(K-1, 0),) + S.shape.
    R_0 (ones) and R_1 (= S) are reconstructed, not stored.
    """
    K = w.shape[1] - 1
    coeff = w * g
    out = np.broadcast_to(coeff[:, 0, None, None], S.shape).copy()
    stack = np.empty((max(K - 1, 0),) + S.shape, dtype=S.dtype)
    if K >= 1:
        out += coeff[:, 1, None, None] * S
    r_prev2, r_prev = None, S
    for k in range(2, K + 1):
        c1, c2 = recurrence_coeffs_scalar(k, lam)
        if k == 2:
            r_k = c1 * (S * r_prev) - c2
        else:
            r_k = c1 * (S * r_prev) - c2 * r_prev2
        stack[k - 2] = r_k
        out += coeff[:, k, None, None] * r_k
        r_prev2, r_prev = r_prev, stack[k - 2]
    return out, stack


def phi_backward(grad, S, stack, w, g, lam):
    """Reverse pass of the gated kernel.

    Returns (dS, T) where T[h, k] = sum over grad * R_k, the per-degree
    reduction from which both weight and degree gradients are assembled.
    dphi/dx uses the derivative recurrence R'_k = c1 (R_{k-1} + x R'_{k-1})
    - c2 R'_{k-2} with R'_0 = 0, R'_1 = 1.
    """
    K = w.shape[1] - 1
    H = w.shape[0]
    T = np.zeros((H, K + 1), dtype=S.dtype)
    T[:, 0] = grad.sum(axis=(0, 2, 3))
    dphi_dx = np.zeros_like(S)
    coeff = w * g
    if K >= 1:
        T[:, 1] = (grad * S).sum(axis=(0, 2, 3))
        dphi_dx += coeff[:, 1, None, None]
    rp_prev2 = np.zeros_like(S)
    rp_prev = np.ones_like(S)
    for k in range(2, K + 1):
        c1, c2 = recurrence_coeffs_scalar(k, lam)
        r_km1 = S if k == 2 else stack[k - 3]
        rp_k = c1 * (r_km1 + S * rp_prev) - c2 * rp_prev2
        T[:, k] = (grad * stack[k - 2]).sum(axis=(0, 2, 3))
        dphi_dx += coeff[:, k, None, None] * rp_k
        rp_prev2, rp_prev = rp_prev, rp_k
    return grad * dphi_dx, T


def adamw_update(p, grad, m, v, step, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step, in place on flat f32/f64 arrays.

    step is the 1-based step count used for bias correction.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    c1 = 1.0 / (1.0 - beta1**step)
    c2 = 1.0 / (1.0 - beta2**step)
    p -= lr * ((m * c1) / (np.sqrt(v * c2) + eps) + wd * p)
