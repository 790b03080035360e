"""Central finite-difference checking for every differentiable piece.

The same harness drives unit tests and the `gradcheck` CLI command: build a
scalar loss, backprop once, then probe a deterministic sample of entries of
each parameter with (f(x+h) - f(x-h)) / 2h and compare.
"""

import numpy as np

from .tensor import Tape, Tensor, sum_to_scalar, mul
from . import tensor as T
from .attention import SkoAttentionLayer, sko_forward
from .model import LanguageModel, ModelConfig


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param(loss_fn, param, h=1e-5, max_probes=24, seed=0):
    """Max relative error between autodiff and central FD for one tensor.

    loss_fn() evaluates the scalar loss eagerly (no tape) from current
    parameter data.  The caller must have already run backward so that
    param.grad is populated.
    """
    if param.grad is None:
        raise ValueError(f"no gradient on {param.name or 'tensor'}")
    flat = param.data.reshape(-1)
    gflat = param.grad.reshape(-1)
    n = flat.size
    if n <= max_probes:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(seed).choice(n, size=max_probes,
                                                 replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, rel_err(fd, float(gflat[i])))
    return worst


def _checked(name, loss_builder, leaves, h=1e-5, max_probes=24):
    """Run backward once, then FD-check every leaf. Yields result rows."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        tape.backward(loss_builder())
    rows = []
    for leaf in leaves:
        err = check_param(loss_builder, leaf, h=h, max_probes=max_probes)
        rows.append((f"{name}.{leaf.name or 'x'}", err))
        leaf.zero_grad()
    return rows


def check_ops(seed=0):
    """FD-check each primitive op through a small composite loss."""
    rng = np.random.default_rng(seed)
    rows = []

    def leaf(shape, scale=1.0, name="x"):
        return Tensor(rng.normal(0, scale, size=shape), requires_grad=True,
                      name=name)

    cases = []
    a = leaf((3, 4), name="a"); b = leaf((3, 4), name="b")
    cases.append(("add", lambda: sum_to_scalar(mul(T.add(a, b), T.add(a, b))), [a, b]))
    c = leaf((3, 4), name="c"); d = leaf((3, 4), name="d")
    cases.append(("sub", lambda: sum_to_scalar(mul(T.sub(c, d), T.sub(c, d))), [c, d]))
    e = leaf((3, 4), name="e"); f = leaf((3, 4), name="f")
    cases.append(("mul", lambda: sum_to_scalar(mul(e, f)), [e, f]))
    g1 = leaf((3, 4), name="num")
    g2 = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, name="den")
    cases.append(("div", lambda: sum_to_scalar(T.div(g1, g2)), [g1, g2]))
    m1 = leaf((3, 5), name="m1"); m2 = leaf((5, 2), name="m2")
    cases.append(("matmul", lambda: sum_to_scalar(mul(T.matmul(m1, m2),
                                                      T.matmul(m1, m2))),
                  [m1, m2]))
    cl = Tensor(rng.uniform(-2, 2, size=(4, 4)), requires_grad=True, name="cl")
    cases.append(("clamp", lambda: sum_to_scalar(mul(T.clamp(cl, -0.9, 0.9),
                                                     T.clamp(cl, -0.9, 0.9))), [cl]))
    nx = leaf((4, 6), name="nx")
    cases.append(("l2norm", lambda: sum_to_scalar(mul(T.l2_normalize_rows(nx),
                                                      leafless(nx.shape, rng))),
                  [nx]))
    rx = leaf((2, 5), name="rx")
    rg = Tensor(rng.uniform(0.5, 1.5, size=(5,)), requires_grad=True, name="rg")
    cases.append(("rmsnorm", lambda: sum_to_scalar(mul(T.rmsnorm(rx, rg, 1e-6),
                                                       leafless(rx.shape, rng))),
                  [rx, rg]))
    sx = leaf((3, 6), name="sx")
    cases.append(("softmax", lambda: sum_to_scalar(mul(T.softmax_rows(sx),
                                                       leafless(sx.shape, rng))),
                  [sx]))
    tx = leaf((4, 4), name="tx")
    cases.append(("tril", lambda: sum_to_scalar(mul(T.tril_mask(tx, 0.0),
                                                    leafless(tx.shape, rng))), [tx]))
    gx = leaf((3, 5), name="gx")
    cases.append(("gelu", lambda: sum_to_scalar(mul(T.gelu(gx),
                                                    leafless(gx.shape, rng))), [gx]))
    emb = leaf((7, 3), name="emb")
    ids = rng.integers(0, 7, size=(2, 4))
    cases.append(("embedding", lambda: sum_to_scalar(mul(T.embedding(emb, ids),
                                                         leafless((2, 4, 3), rng))),
                  [emb]))
    lg = leaf((2, 3, 6), name="logits")
    tgt = rng.integers(0, 6, size=(2, 3))
    cases.append(("cross_entropy", lambda: T.cross_entropy(lg, tgt), [lg]))
    mean_x = leaf((3, 4), name="mx")
    cases.append(("mean", lambda: T.mean_all(mul(mean_x, mean_x)), [mean_x]))

    for name, builder, leaves in cases:
        rows.extend(_checked(name, builder, leaves))
    return rows


_COEFF_CACHE = {}


def leafless(shape, rng):
    """A fixed non-leaf coefficient tensor to make losses non-symmetric."""
    key = tuple(shape)
    if key not in _COEFF_CACHE:
        _COEFF_CACHE[key] = Tensor(rng.normal(0, 1, size=shape))
    return _COEFF_CACHE[key]


def check_sko_layer(seed=0, h=1e-5):
    """FD-check every parameter of one kernel-attention layer.

    Degrees are set to fractional values (2.5, 3.5, ...) so the gate is in
    its linear region and the n-gradient is informative.
    """
    rng = np.random.default_rng(seed)
    D, H, N, B = 8, 2, 5, 2
    layer = SkoAttentionLayer(D, H, q=4,
                              degrees=[2.5 + i for i in range(H)], rng=rng,
                              learnable_degrees=True, prefix="layer")
    for p in (layer.wq, layer.wk, layer.wv, layer.wo):
        p.data *= 10.0  # keep activations away from denormal territory
    layer.kernel.weights.data[:] = rng.normal(0.7, 0.3,
                                              layer.kernel.weights.shape)
    x = Tensor(rng.normal(0, 1.0, size=(B, N, D)), requires_grad=True,
               name="x")
    coeff = Tensor(rng.normal(0, 1, size=(B, N, D)))

    def loss():
        return sum_to_scalar(mul(sko_forward(x, layer), coeff))

    leaves = layer.params() + [x]
    rows = []
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        tape.backward(loss())
    for leaf in leaves:
        err = check_param(loss, leaf, h=h)
        rows.append((f"sko_layer.{leaf.name}", err))
        leaf.zero_grad()
    return rows


def check_micro_model(seed=0, h=5e-6, mechanism="sko"):
    """End-to-end FD check of d(loss)/d(theta) for a tiny LM."""
    cfg = ModelConfig(vocab_size=11, D=8, N=6, H=2, L=1, q=4,
                      degrees=[2.5, 3.5], mechanism=mechanism, seed=seed,
                      learn_degrees=(mechanism == "sko"))
    model = LanguageModel(cfg)
    for blk in model.blocks:
        # at the 0.02 init the q/k maps are so small that both mechanisms
        # sit at degenerate points (row norms ~1e-3 ahead of the normalize;
        # near-uniform softmax scores) where FD loses all precision; probe
        # at a generic well-scaled point instead
        blk.attn.wq.data *= 30.0
        blk.attn.wk.data *= 30.0
    rng = np.random.default_rng(seed + 1)
    x = rng.integers(0, cfg.vocab_size, size=(2, 5))
    y = rng.integers(0, cfg.vocab_size, size=(2, 5))

    def loss():
        return model.loss(x, y)

    leaves = model.trainable()
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        tape.backward(loss())
    rows = []
    for leaf in leaves:
        err = check_param(loss, leaf, h=h, max_probes=12)
        rows.append((f"model.{leaf.name}", err))
        leaf.zero_grad()
    return rows


def run_all(scale="quick"):
    """Full table of (name, rel_err) rows for the CLI and selftest."""
    rows = []
    rows.extend(check_ops())
    rows.extend(check_sko_layer())
    rows.extend(check_micro_model(mechanism="sko"))
    if scale == "full":
        # softmax curvature differs; 2e-5 is the sweet spot there
        rows.extend(check_micro_model(mechanism="baseline", h=2e-5))
    return rows
