"""Gated, weighted expansions of normalized ultraspherical polynomials.

The family R_k is defined on [-1, 1] by R_0(x) = 1, R_1(x) = x and the
three-term recurrence

    R_k(x) = c1 * x * R_{k-1}(x) - c2 * R_{k-2}(x),
    c1 = 2(k + lam - 1) / (k + 2 lam - 1),   c2 = (k - 1) / (k + 2 lam - 1),

with lam = (q - 1) / 2 for an intrinsic dimension q >= 2.  Since c1 - c2 = 1,
every R_k satisfies R_k(1) = 1, and |R_k| <= 1 on the interval.  At q = 2
(lam = 1/2) the family reduces to the Legendre polynomials.

The kernel evaluated on a similarity matrix is the gated expansion

    phi(x) = sum_k  w_k * gamma_k(n) * R_k(x),
    gamma_k(n) = clamp(n - k + 1, 0, 1),

where n is a per-head real "maximal degree": integer degrees switch terms in
or out, and the single fractional term fades in linearly, so phi is
continuous in n.
"""

import math
import os

import numpy as np

from . import kernels
from .tensor import Tensor, _active_tape, _emit, clamp, get_default_dtype

# Cosine similarities may exceed [-1, 1] by float rounding; anything past
# this slack indicates the inputs were never normalized.
RANGE_TOL = 1e-4


def recurrence_coeffs(k: int, lam: float):
    """Coefficients (c1, c2) of the degree-k recurrence step.

    Parameters
    ----------
    k : int
        Target degree, at least 2.
    lam : float
        Ultraspherical parameter, positive.

    Returns
    -------
    (c1, c2) with c1 - c2 == 1 up to rounding.
    """
    if k < 2:
        raise ValueError(f"recurrence starts at k=2, got k={k}")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    den = k + 2.0 * lam - 1.0
    c1 = 2.0 * (k + lam - 1.0) / den
    c2 = (k - 1.0) / den
    if os.environ.get("SKO_FAULT_FLIP_C2") == "1":
        # Test-harness fault hook: deliberately breaks the recurrence so the
        # selftest suites can prove they catch a corrupted kernel.
        c2 = -c2
    return c1, c2


def gate(k: int, n: float) -> float:
    """Soft inclusion weight of degree k under maximal degree n.

    Equals 1 for k <= n, 0 for k >= n + 1, linear in between.
    """
    return max(0.0, min(1.0, n - k + 1.0))


def gate_matrix(degrees: np.ndarray, K: int) -> np.ndarray:
    """(H, K+1) matrix of gate values gamma_k(n_h)."""
    ks = np.arange(K + 1, dtype=degrees.dtype)
    return np.clip(degrees[:, None] - ks[None, :] + 1.0, 0.0, 1.0)


def gate_prime_matrix(degrees: np.ndarray, K: int) -> np.ndarray:
    """(H, K+1) matrix of d(gamma_k)/dn: 1 on the fractional term, else 0."""
    ks = np.arange(K + 1, dtype=degrees.dtype)
    u = degrees[:, None] - ks[None, :] + 1.0
    return ((u > 0.0) & (u < 1.0)).astype(degrees.dtype)


class KernelParams:
    """Per-layer kernel state: q, per-head degrees n, and weight rows.

    The expansion order K = ceil(max(n)) is fixed at construction; weights
    have one row of length K+1 per head and start at all ones.  Degrees are
    fixed hyperparameters unless ``learnable_degrees`` is set.
    """

    def __init__(self, q: int, degrees, learnable_degrees: bool = False):
        if int(q) != q or q < 2:
            raise ValueError(f"q must be an integer >= 2, got {q!r}")
        deg = np.asarray(degrees, dtype=get_default_dtype())
        if deg.ndim != 1 or deg.size == 0:
            raise ValueError("degrees must be a non-empty 1-D sequence")
        if np.any(deg < 0):
            raise ValueError(f"degrees must be >= 0, got {deg.tolist()}")
        self.q = int(q)
        self.lam = (self.q - 1) / 2.0
        self.K = int(math.ceil(float(deg.max())))
        self.learnable_degrees = bool(learnable_degrees)
        self.degrees = Tensor(deg, requires_grad=self.learnable_degrees,
                              name="kernel.n")
        self.weights = Tensor(
            np.ones((deg.size, self.K + 1), dtype=get_default_dtype()),
            requires_grad=True, name="kernel.W")

    @property
    def heads(self) -> int:
        return self.degrees.shape[0]

    def clamp_degrees(self) -> None:
        """Keep learnable degrees inside [0, K] so K stays valid."""
        np.clip(self.degrees.data, 0.0, float(self.K), out=self.degrees.data)


def _check_range(xd: np.ndarray) -> None:
    worst = float(np.max(np.abs(xd))) if xd.size else 0.0
    if worst > 1.0 + RANGE_TOL:
        raise ValueError(
            f"kernel input magnitude {worst:.6g} exceeds 1 + {RANGE_TOL}; "
            "inputs must be cosine similarities (normalize upstream)")


def eval_polynomials(x: Tensor, lam: float, K: int):
    """Evaluate R_0..R_K elementwise on x, as a list of tensors.

    x is clamped to [-1, 1] first; entries beyond +-(1 + RANGE_TOL) raise.
    Built from primitive tensor ops, so the result is differentiable; the
    fused eval_kernel below is what the attention layer actually uses.
    """
    _check_range(x.data)
    xc = clamp(x, -1.0, 1.0)
    rs = [Tensor(np.ones(x.shape, dtype=x.dtype)), xc]
    for k in range(2, K + 1):
        c1, c2 = recurrence_coeffs(k, lam)
        rs.append(c1 * (xc * rs[-1]) - c2 * rs[-2])
    return rs[: K + 1]


def eval_kernel(x: Tensor, params: KernelParams) -> Tensor:
    """phi(x) per head: sum_k w[h,k] * gamma_k(n_h) * R_k(x).

    x has shape (H, N, N) or (B, H, N, N) with H == params.heads.  Under an
    active tape the recurrence stack R_2..R_K is retained for the backward
    pass (linear in K); otherwise only the rolling two-term window is used.

    Differentiable in x, params.weights and params.degrees.  The gradient in
    x is zeroed where |x| >= 1 (consistent with the clamp).
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"expected (H,N,N) or (B,H,N,N), got shape {x.shape}")
    H = x.shape[-3]
    if H != params.heads:
        raise ValueError(f"x has {H} heads but params has {params.heads}")
    _check_range(x.data)

    shape = x.shape
    xd = x.data
    x4 = xd if xd.ndim == 4 else xd[None]
    xc = np.clip(x4, -1.0, 1.0)
    w = params.weights.data
    n = params.degrees.data
    g = gate_matrix(n, params.K)
    lam = params.lam
    inputs = (x, params.weights, params.degrees)

    tape = _active_tape()
    if tape is None or not any(tape._tracks(t) for t in inputs):
        phi = kernels.phi_rolling(xc, w, g, lam)
        return _emit(phi.reshape(shape), (), None, "kernel")

    phi, stack = kernels.phi_stack(xc, w, g, lam)
    interior = np.abs(x4) < 1.0
    gp = gate_prime_matrix(n, params.K)

    def backward(grad):
        g4 = grad.reshape(x4.shape)
        dS, T = kernels.phi_backward(g4, xc, stack, w, g, lam)
        dS *= interior
        dW = g * T
        dn = np.sum((w * T) * gp, axis=1)
        return dS.reshape(shape), dW, dn

    # Saving the stack slice-by-slice keeps the tape's buffer census honest:
    # one retained N-by-N matrix per recurrence degree, plus the input.
    saved = (xc,) + tuple(stack)
    return _emit(phi.reshape(shape), inputs, backward, "kernel", saved=saved)


def kernel_profile(params: KernelParams, head: int, grid_size: int):
    """Tabulate (x, phi(x)) for one head on a uniform grid over [-1, 1]."""
    if not 0 <= head < params.heads:
        raise IndexError(f"head {head} out of range [0, {params.heads})")
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    xs = np.linspace(-1.0, 1.0, grid_size)
    w = params.weights.data[head]
    g = gate_matrix(params.degrees.data, params.K)[head]
    phi = np.full_like(xs, w[0] * g[0])
    if params.K >= 1:
        phi = phi + (w[1] * g[1]) * xs
        r_prev2 = np.ones_like(xs)
        r_prev = xs
        for k in range(2, params.K + 1):
            c1, c2 = recurrence_coeffs(k, params.lam)
            r_k = c1 * (xs * r_prev) - c2 * r_prev2
            phi = phi + (w[k] * g[k]) * r_k
            r_prev2, r_prev = r_prev, r_k
    return list(zip(xs.tolist(), phi.tolist()))
