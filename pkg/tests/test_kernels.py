"""Backend-level tests for the hot kernels.

Covers numpy/numba parity, the rolling-vs-stacked forward equivalence,
the hand-rolled backward pass against finite differences, and the AdamW
inner loop against a textbook reference.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from sko import kernels
from sko.kernels import get_backend

from oracles import adamw_reference, phi_scalar

numpy_backend = get_backend("numpy")

try:
    numba_backend = get_backend("numba")
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba_backend = None
    HAVE_NUMBA = False

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

# (K, lam) pairs spanning the edge cases: constant-only, linear-only, the
# first recurrence step, and a deep expansion at large lam.
CASES = [(0, 0.5), (1, 1.0), (2, 0.5), (3, 7.5), (5, 31.5)]


def _random_inputs(K, seed, H=3, shape=(2, 3, 4, 4)):
    rng = np.random.default_rng(seed)
    S = np.clip(rng.normal(size=shape), -1.0, 1.0)
    w = rng.normal(size=(H, K + 1))
    g = np.clip(rng.uniform(-0.5, 1.5, size=(H, K + 1)), 0.0, 1.0)
    return S, w, g


# ---------------------------------------------------------------------------
# single-backend behavior
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("K,lam", CASES)
def test_rolling_equals_stack_forward(K, lam):
    S, w, g = _random_inputs(K, seed=K)
    phi_a = numpy_backend.phi_rolling(S, w, g, lam)
    phi_b, stack = numpy_backend.phi_stack(S, w, g, lam)
    assert np.array_equal(phi_a, phi_b)
    assert stack.shape == (max(K - 1, 0),) + S.shape


def test_rolling_matches_scalar_reference():
    K, lam = 4, 1.5
    S, w, g = _random_inputs(K, seed=11, H=2, shape=(1, 2, 3, 3))
    phi = numpy_backend.phi_rolling(S, w, g, lam)
    for b in range(1):
        for h in range(2):
            for i in range(3):
                for j in range(3):
                    # phi_scalar gates by a scalar degree n; here the gate
                    # values are explicit, so expand the sum directly.
                    want = sum(
                        w[h, k] * g[h, k] * phi_scalar(
                            S[b, h, i, j],
                            np.eye(K + 1)[k],
                            K,
                            lam,
                        )
                        for k in range(K + 1)
                    )
                    assert abs(phi[b, h, i, j] - want) < 1e-12


def test_stack_holds_degrees_two_and_up():
    # stack[k-2] must be R_k; verify against the recurrence run by hand.
    K, lam = 5, 2.5
    S, w, g = _random_inputs(K, seed=3)
    _, stack = numpy_backend.phi_stack(S, w, g, lam)
    r_prev2, r_prev = np.ones_like(S), S
    for k in range(2, K + 1):
        c1, c2 = kernels.recurrence_coeffs_scalar(k, lam)
        r_k = c1 * (S * r_prev) - c2 * r_prev2
        assert np.allclose(stack[k - 2], r_k, atol=1e-14)
        r_prev2, r_prev = r_prev, r_k


@pytest.mark.parametrize("K,lam", CASES)
def test_backward_matches_finite_differences(K, lam):
    S, w, g = _random_inputs(K, seed=100 + K, shape=(1, 3, 3, 3))
    grad = np.random.default_rng(200 + K).normal(size=S.shape)
    _, stack = numpy_backend.phi_stack(S, w, g, lam)
    dS, T = numpy_backend.phi_backward(grad, S, stack, w, g, lam)

    def loss(S_, w_):
        return float(np.sum(grad * numpy_backend.phi_rolling(S_, w_, g, lam)))

    h = 1e-6
    # dS entries
    flat = S.reshape(-1)
    for idx in [0, 7, 13, 26]:
        Sp, Sm = S.copy().reshape(-1), S.copy().reshape(-1)
        Sp[idx] += h
        Sm[idx] -= h
        fd = (loss(Sp.reshape(S.shape), w) - loss(Sm.reshape(S.shape), w)) / (
            2 * h
        )
        got = dS.reshape(-1)[idx]
        assert abs(got - fd) < 1e-6 * max(1.0, abs(fd)), (idx, got, fd)
        del flat
        flat = S.reshape(-1)
    # weight gradient: d loss / d w[h,k] == g[h,k] * T[h,k]
    for hh in range(w.shape[0]):
        for k in range(K + 1):
            wp, wm = w.copy(), w.copy()
            wp[hh, k] += h
            wm[hh, k] -= h
            fd = (loss(S, wp) - loss(S, wm)) / (2 * h)
            got = g[hh, k] * T[hh, k]
            assert abs(got - fd) < 1e-6 * max(1.0, abs(fd)), (hh, k, got, fd)


def test_backward_constant_kernel_has_zero_slope():
    # K=0: phi is a per-head constant, so dS must be identically zero and
    # T[:, 0] the plain sum of the incoming gradient.
    S, w, g = _random_inputs(0, seed=5)
    grad = np.random.default_rng(6).normal(size=S.shape)
    _, stack = numpy_backend.phi_stack(S, w, g, 0.5)
    dS, T = numpy_backend.phi_backward(grad, S, stack, w, g, 0.5)
    assert np.all(dS == 0.0)
    assert np.allclose(T[:, 0], grad.sum(axis=(0, 2, 3)), atol=1e-12)


def test_backward_linear_kernel_slope_is_coefficient():
    S, w, g = _random_inputs(1, seed=7)
    grad = np.random.default_rng(8).normal(size=S.shape)
    _, stack = numpy_backend.phi_stack(S, w, g, 1.0)
    dS, _ = numpy_backend.phi_backward(grad, S, stack, w, g, 1.0)
    want = grad * (w[:, 1] * g[:, 1])[None, :, None, None]
    assert np.allclose(dS, want, atol=1e-14)


def test_recurrence_coeffs_scalar_sums_to_one():
    for lam in (0.5, 1.0, 7.5, 31.5):
        for k in range(2, 13):
            c1, c2 = kernels.recurrence_coeffs_scalar(k, lam)
            assert abs((c1 - c2) - 1.0) < 1e-12


def test_phi_preserves_dtype():
    S, w, g = _random_inputs(3, seed=9)
    S32 = S.astype(np.float32)
    phi = numpy_backend.phi_rolling(S32, w.astype(np.float32),
                                    g.astype(np.float32), 1.5)
    assert phi.dtype == np.float32


# ---------------------------------------------------------------------------
# numpy / numba parity
# ---------------------------------------------------------------------------


@needs_numba
@pytest.mark.parametrize("K,lam", CASES)
def test_backends_agree_forward(K, lam):
    S, w, g = _random_inputs(K, seed=300 + K)
    a = numpy_backend.phi_rolling(S, w, g, lam)
    b = numba_backend.phi_rolling(S, w, g, lam)
    # Expression structure is mirrored between the two, so the match is
    # bitwise, not merely close.
    assert np.array_equal(a, b)

    pa, sa = numpy_backend.phi_stack(S, w, g, lam)
    pb, sb = numba_backend.phi_stack(S, w, g, lam)
    assert np.array_equal(pa, pb)
    assert np.array_equal(sa, sb)


@needs_numba
@pytest.mark.parametrize("K,lam", CASES)
def test_backends_agree_backward(K, lam):
    S, w, g = _random_inputs(K, seed=400 + K)
    grad = np.random.default_rng(500 + K).normal(size=S.shape)
    _, stack = numpy_backend.phi_stack(S, w, g, lam)
    da, Ta = numpy_backend.phi_backward(grad, S, stack, w, g, lam)
    db, Tb = numba_backend.phi_backward(grad, S, stack, w, g, lam)
    assert np.array_equal(da, db)
    # T is a large reduction; numpy sums pairwise, the jit loop sequentially,
    # so allow rounding-level slack there.
    np.testing.assert_allclose(Ta, Tb, rtol=1e-12, atol=1e-13)


@needs_numba
def test_backends_agree_adamw():
    rng = np.random.default_rng(17)
    p0 = rng.normal(size=(4, 5))
    g0 = rng.normal(size=(4, 5))
    kw = dict(lr=0.01, beta1=0.9, beta2=0.95, eps=1e-8, wd=0.1)

    pa, ma, va = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    pb, mb, vb = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for t in range(1, 6):
        numpy_backend.adamw_update(pa, g0, ma, va, t, **kw)
        numba_backend.adamw_update(pb, g0, mb, vb, t, **kw)
    np.testing.assert_allclose(pa, pb, rtol=1e-14, atol=0)
    np.testing.assert_allclose(ma, mb, rtol=1e-14, atol=0)
    np.testing.assert_allclose(va, vb, rtol=1e-14, atol=0)


# ---------------------------------------------------------------------------
# AdamW correctness
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("backend_getter", ["numpy", "numba"])
def test_adamw_matches_reference(backend_getter):
    if backend_getter == "numba" and not HAVE_NUMBA:
        pytest.skip("numba not installed")
    be = get_backend(backend_getter)
    rng = np.random.default_rng(23)
    p = rng.normal(size=12)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    p_ref, m_ref, v_ref = p.copy(), m.copy(), v.copy()
    lr, b1, b2, eps, wd = 3e-3, 0.9, 0.999, 1e-8, 0.05
    for t in range(1, 8):
        grad = rng.normal(size=12)
        be.adamw_update(p, grad, m, v, t, lr, b1, b2, eps, wd)
        p_ref, m_ref, v_ref = adamw_reference(
            p_ref, grad, m_ref, v_ref, t, lr, b1, b2, eps, wd)
    np.testing.assert_allclose(p, p_ref, rtol=1e-13, atol=0)
    np.testing.assert_allclose(m, m_ref, rtol=1e-13, atol=0)
    np.testing.assert_allclose(v, v_ref, rtol=1e-13, atol=0)


def test_adamw_updates_in_place_and_leaves_grad_alone():
    p = np.ones(4)
    grad = np.full(4, 2.0)
    grad_copy = grad.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    pid, mid, vid = id(p), id(m), id(v)
    numpy_backend.adamw_update(p, grad, m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0)
    assert (id(p), id(m), id(v)) == (pid, mid, vid)
    assert np.array_equal(grad, grad_copy)
    assert not np.array_equal(p, np.ones(4))


@needs_numba
def test_adamw_numba_rejects_noncontiguous():
    base = np.zeros((4, 8))
    p = base[:, ::2]  # stride-2 view
    assert not p.flags.c_contiguous
    g = np.ones_like(p) * 0.0 + 1.0
    g = np.ascontiguousarray(g)
    m = np.zeros((4, 4))
    v = np.zeros((4, 4))
    with pytest.raises(ValueError, match="contiguous"):
        numba_backend.adamw_update(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------


def test_active_backend_is_valid():
    assert kernels.backend_name() in ("numpy", "numba")
    for fn in ("phi_rolling", "phi_stack", "phi_backward", "adamw_update"):
        assert callable(getattr(kernels, fn))


def test_get_backend_unknown_name():
    with pytest.raises(ValueError, match="unknown backend"):
        get_backend("cuda")


def _run_with_backend(value):
    env = dict(os.environ, SKO_BACKEND=value)
    return subprocess.run(
        [sys.executable, "-c",
         "from sko import kernels; print(kernels.backend_name())"],
        capture_output=True, text=True, env=env,
        cwd=os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
    )


def test_env_forces_numpy_backend():
    res = _run_with_backend("numpy")
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == "numpy"


@needs_numba
def test_env_forces_numba_backend():
    res = _run_with_backend("numba")
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip() == "numba"


def test_env_rejects_unknown_backend():
    res = _run_with_backend("fortran")
    assert res.returncode != 0
    assert "SKO_BACKEND" in res.stderr
