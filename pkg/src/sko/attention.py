"""Causal multi-head attention, in two interchangeable flavors.

SkoAttentionLayer replaces the softmax with a gated polynomial kernel
applied to cosine similarities of L2-normalized queries and keys:

    S    = Q_hat K_hat^T            (entries in [-1, 1])
    Phi  = kernel(S)                (per-head polynomial expansion)
    O    = Tril(Phi) V / M,   M_i = i + 1
    out  = RMSNorm(concat_heads(O)) W_O

The division by the causal context length M plays the role of softmax's
normalizing denominator; RMSNorm then removes the residual per-row scale
(see density_invariance_check).  BaselineAttentionLayer is the standard
softmax(Q K^T / sqrt(d)) layer under the same projection layout, so the two
mechanisms differ in parameters only by the kernel weights and the RMSNorm
gain.
"""

import numpy as np

from .tensor import (Tensor, ShapeError, div, matmul, mul, l2_normalize_rows,
                     reshape, rmsnorm, softmax_rows, transpose, tril_mask,
                     get_default_dtype)
from .ultraspherical import KernelParams, eval_kernel


def _init_weight(rng, shape, std, name):
    data = rng.normal(0.0, std, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True, name=name)


class SkoAttentionLayer:
    """Polynomial-kernel attention over H heads of width d = D // H."""

    def __init__(self, D, H, q, degrees, rng, rms_eps=1e-6, init_std=0.02,
                 learnable_degrees=False, prefix="attn"):
        if D % H != 0:
            raise ShapeError(f"D={D} not divisible by H={H}")
        degrees = np.asarray(degrees, dtype=float)
        if degrees.shape != (H,):
            raise ShapeError(f"need one degree per head: got {degrees.shape}, H={H}")
        self.D, self.H, self.d = D, H, D // H
        self.rms_eps = float(rms_eps)
        self.wq = _init_weight(rng, (D, D), init_std, prefix + ".wq")
        self.wk = _init_weight(rng, (D, D), init_std, prefix + ".wk")
        self.wv = _init_weight(rng, (D, D), init_std, prefix + ".wv")
        self.kernel = KernelParams(q, degrees, learnable_degrees)
        self.kernel.weights.name = prefix + ".kernel.W"
        self.kernel.degrees.name = prefix + ".kernel.n"
        self.rms_gain = Tensor(np.ones(D, dtype=get_default_dtype()),
                               requires_grad=True, name=prefix + ".rms_gain")
        self.wo = _init_weight(rng, (D, D), init_std, prefix + ".wo")

    def params(self):
        return [self.wq, self.wk, self.wv, self.kernel.weights,
                self.kernel.degrees, self.rms_gain, self.wo]

    def forward(self, x):
        return sko_forward(x, self)


class BaselineAttentionLayer:
    """Standard causal softmax attention with the same projection layout."""

    def __init__(self, D, H, rng, init_std=0.02, prefix="attn"):
        if D % H != 0:
            raise ShapeError(f"D={D} not divisible by H={H}")
        self.D, self.H, self.d = D, H, D // H
        self.scale = 1.0 / np.sqrt(self.d)
        self.wq = _init_weight(rng, (D, D), init_std, prefix + ".wq")
        self.wk = _init_weight(rng, (D, D), init_std, prefix + ".wk")
        self.wv = _init_weight(rng, (D, D), init_std, prefix + ".wv")
        self.wo = _init_weight(rng, (D, D), init_std, prefix + ".wo")

    def params(self):
        return [self.wq, self.wk, self.wv, self.wo]

    def forward(self, x):
        return baseline_forward(x, self)


def _split_heads(t, B, N, H, d):
    # (B, N, D) -> (B, H, N, d)
    return transpose(reshape(t, (B, N, H, d)), (0, 2, 1, 3))


def _merge_heads(t, B, N, D):
    # (B, H, N, d) -> (B, N, D)
    return reshape(transpose(t, (0, 2, 1, 3)), (B, N, D))


def _check_input(x, D):
    if x.ndim != 3:
        raise ShapeError(f"expected (B, N, D) input, got shape {x.shape}")
    B, N, xd = x.shape
    if xd != D:
        raise ShapeError(f"input width {xd} != layer D={D}")
    if N < 1:
        raise ShapeError("empty sequence (N=0)")
    return B, N


def sko_forward(x: Tensor, layer: SkoAttentionLayer, row_scale=None) -> Tensor:
    """Kernel attention over a (B, N, D) batch.

    row_scale, if given, multiplies the pre-RMSNorm aggregate by a positive
    per-row scalar (scalar or array broadcastable to (B, N, 1)).  It exists
    so tests can verify that RMSNorm cancels any such factor; training never
    sets it.
    """
    B, N = _check_input(x, layer.D)
    q = _split_heads(matmul(x, layer.wq), B, N, layer.H, layer.d)
    k = _split_heads(matmul(x, layer.wk), B, N, layer.H, layer.d)
    v = _split_heads(matmul(x, layer.wv), B, N, layer.H, layer.d)
    qn = l2_normalize_rows(q)
    kn = l2_normalize_rows(k)
    s = matmul(qn, transpose(kn, (0, 1, 3, 2)))
    phi = eval_kernel(s, layer.kernel)
    phi = tril_mask(phi, 0.0)
    m = np.arange(1, N + 1, dtype=x.dtype).reshape(N, 1)
    o = div(matmul(phi, v), Tensor(m))
    o = _merge_heads(o, B, N, layer.D)
    if row_scale is not None:
        o = mul(o, row_scale)
    o = rmsnorm(o, layer.rms_gain, layer.rms_eps)
    return matmul(o, layer.wo)


def baseline_forward(x: Tensor, layer: BaselineAttentionLayer) -> Tensor:
    """Softmax attention over a (B, N, D) batch."""
    B, N = _check_input(x, layer.D)
    q = _split_heads(matmul(x, layer.wq), B, N, layer.H, layer.d)
    k = _split_heads(matmul(x, layer.wk), B, N, layer.H, layer.d)
    v = _split_heads(matmul(x, layer.wv), B, N, layer.H, layer.d)
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), layer.scale)
    probs = softmax_rows(tril_mask(scores, float("-inf")))
    o = _merge_heads(matmul(probs, v), B, N, layer.D)
    return matmul(o, layer.wo)


def trainable_count(layer) -> int:
    return sum(t.size for t in layer.params() if t.requires_grad)


def parity_gap(sko_layer: SkoAttentionLayer,
               baseline_layer: BaselineAttentionLayer) -> int:
    """Trainable-parameter difference between the two mechanisms.

    Equals H*(K+1) kernel weights plus D gain scalars (plus H degrees when
    those are learnable) — the price of the kernel machinery.
    """
    return trainable_count(sko_layer) - trainable_count(baseline_layer)


def density_invariance_check(layer: SkoAttentionLayer, x: Tensor,
                             alpha: float) -> dict:
    """Measure how much a positive per-row rescaling of the pre-RMSNorm
    aggregate changes the layer output.

    In exact arithmetic the change is zero (RMSNorm divides the factor back
    out); with a finite eps inside the norm, tiny rows pick up an eps-order
    difference.  Returns max absolute and relative differences.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    base = sko_forward(x, layer)
    scaled = sko_forward(x, layer, row_scale=float(alpha))
    diff = np.abs(scaled.data - base.data)
    denom = np.maximum(np.abs(base.data), 1e-12)
    return {
        "alpha": float(alpha),
        "max_abs_diff": float(diff.max()),
        "max_rel_diff": float((diff / denom).max()),
        "identical": bool(np.array_equal(scaled.data, base.data)),
    }
