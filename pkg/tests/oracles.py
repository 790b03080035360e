"""Independent reference implementations used as test oracles.

Everything here is written from the defining formulas in plain numpy /
Python loops, sharing no code with the package under test.  Slow on
purpose; correctness is the only goal.
"""

import numpy as np


# ---------------------------------------------------------------------------
# classical polynomial recurrences (not the package's normalized form)

def legendre_table(x, K):
    """P_0..P_K at points x via Bonnet's recurrence.

    k P_k = (2k-1) x P_{k-1} - (k-1) P_{k-2}.
    """
    x = np.asarray(x, dtype=float)
    out = [np.ones_like(x), x.copy()]
    for k in range(2, K + 1):
        out.append(((2 * k - 1) * x * out[-1] - (k - 1) * out[-2]) / k)
    return out[: K + 1]


def gegenbauer_table(x, lam, K):
    """C_0^lam .. C_K^lam via the standard recurrence.

    k C_k = 2 x (k + lam - 1) C_{k-1} - (k + 2 lam - 2) C_{k-2},
    C_0 = 1, C_1 = 2 lam x.
    """
    x = np.asarray(x, dtype=float)
    out = [np.ones_like(x), 2.0 * lam * x]
    for k in range(2, K + 1):
        a = 2.0 * x * (k + lam - 1.0) * out[-1]
        b = (k + 2.0 * lam - 2.0) * out[-2]
        out.append((a - b) / k)
    return out[: K + 1]


def gegenbauer_at_one(lam, K):
    """C_k^lam(1) for k = 0..K: C_k(1) = C_{k-1}(1) * (k + 2 lam - 1) / k."""
    vals = [1.0]
    for k in range(1, K + 1):
        vals.append(vals[-1] * (k + 2.0 * lam - 1.0) / k)
    return vals


def phi_scalar(x, weights, n, lam):
    """Gated expansion at a single similarity value, scalar Python loop."""
    K = len(weights) - 1
    xc = float(np.clip(x, -1.0, 1.0))
    table = [1.0, xc]
    for k in range(2, K + 1):
        den = k + 2.0 * lam - 1.0
        c1 = 2.0 * (k + lam - 1.0) / den
        c2 = (k - 1.0) / den
        table.append(c1 * xc * table[-1] - c2 * table[-2])
    total = 0.0
    for k in range(K + 1):
        gamma = max(0.0, min(1.0, n - k + 1.0))
        total += weights[k] * gamma * table[k]
    return total


# ---------------------------------------------------------------------------
# dense-layer pieces

def rmsnorm_np(x, gain, eps):
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return (x / rms) * gain


def gelu_np(x):
    c = 0.7978845608028654  # sqrt(2/pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def softmax_np(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _heads(mat, H):
    """(N, D) -> list of H (N, d) slices."""
    N, D = mat.shape
    d = D // H
    return [mat[:, h * d:(h + 1) * d] for h in range(H)]


def naive_kernel_attention(x, layer):
    """Per-position loop over one (B, N, D) batch, kernel mechanism.

    Mirrors the layer contract: project, split heads, L2-normalize rows,
    phi over pairwise cosines, causal sum divided by the prefix length,
    merge heads, RMS-normalize, output projection.
    """
    xd = np.asarray(x, dtype=float)
    B, N, D = xd.shape
    H = layer.H
    kp = layer.kernel
    lam = kp.lam
    W = kp.weights.data
    degs = kp.degrees.data
    out = np.zeros_like(xd)
    for b in range(B):
        q = xd[b] @ layer.wq.data
        k = xd[b] @ layer.wk.data
        v = xd[b] @ layer.wv.data
        merged = np.zeros((N, D))
        for h in range(H):
            qh, kh, vh = _heads(q, H)[h], _heads(k, H)[h], _heads(v, H)[h]
            qn = qh / np.maximum(np.linalg.norm(qh, axis=1, keepdims=True),
                                 1e-12)
            kn = kh / np.maximum(np.linalg.norm(kh, axis=1, keepdims=True),
                                 1e-12)
            d = D // H
            for i in range(N):
                acc = np.zeros(d)
                for j in range(i + 1):
                    s = float(qn[i] @ kn[j])
                    acc += phi_scalar(s, W[h], float(degs[h]), lam) * vh[j]
                merged[i, h * d:(h + 1) * d] = acc / (i + 1)
        normed = rmsnorm_np(merged, layer.rms_gain.data, layer.rms_eps)
        out[b] = normed @ layer.wo.data
    return out


def naive_softmax_attention(x, layer):
    """Per-position loop, classical scaled-dot-product mechanism."""
    xd = np.asarray(x, dtype=float)
    B, N, D = xd.shape
    H = layer.H
    d = D // H
    out = np.zeros_like(xd)
    for b in range(B):
        q = xd[b] @ layer.wq.data
        k = xd[b] @ layer.wk.data
        v = xd[b] @ layer.wv.data
        merged = np.zeros((N, D))
        for h in range(H):
            qh, kh, vh = _heads(q, H)[h], _heads(k, H)[h], _heads(v, H)[h]
            for i in range(N):
                scores = np.array([qh[i] @ kh[j] for j in range(i + 1)])
                w = softmax_np(scores / np.sqrt(d))
                merged[i, h * d:(h + 1) * d] = w @ vh[: i + 1]
        out[b] = merged @ layer.wo.data
    return out


def naive_model_logits(model, tokens):
    """Hand-stepped forward pass of the full language model in numpy."""
    cfg = model.cfg
    tokens = np.asarray(tokens)
    B, n = tokens.shape
    x = model.tok_emb.data[tokens] + model.pos_emb.data[np.arange(n)]
    for blk in model.blocks:
        pre = rmsnorm_np(x, blk.ln1_gain.data, blk.rms_eps)
        if cfg.mechanism == "sko":
            att = naive_kernel_attention(pre, blk.attn)
        else:
            att = naive_softmax_attention(pre, blk.attn)
        x = x + att
        pre = rmsnorm_np(x, blk.ln2_gain.data, blk.rms_eps)
        x = x + gelu_np(pre @ blk.fc1.data) @ blk.fc2.data
    x = rmsnorm_np(x, model.ln_f_gain.data, cfg.rms_eps)
    if model.lm_head is not None:
        return x @ model.lm_head.data
    return x @ model.tok_emb.data.T


def adamw_reference(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    """One decoupled-weight-decay Adam step; returns (p, m, v)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    return p, m, v
