"""The reference implementations must agree with third-party ground truth.

If anything in this file fails, every oracle-based test downstream is
meaningless, so it runs first alphabetically-ish and depends only on
numpy/scipy plus tests/oracles.py.
"""

import numpy as np
import pytest

import oracles

scipy_special = pytest.importorskip("scipy.special")

GRID = np.linspace(-1.0, 1.0, 501)


def test_legendre_oracle_matches_scipy():
    table = oracles.legendre_table(GRID, 10)
    for k in range(11):
        want = scipy_special.eval_legendre(k, GRID)
        assert np.max(np.abs(table[k] - want)) < 1e-12


@pytest.mark.parametrize("lam", [0.5, 1.0, 1.5, 7.5, 31.5])
def test_gegenbauer_oracle_matches_scipy(lam):
    table = oracles.gegenbauer_table(GRID, lam, 10)
    for k in range(11):
        want = scipy_special.eval_gegenbauer(k, lam, GRID)
        err = np.max(np.abs(table[k] - want) / np.maximum(1.0, np.abs(want)))
        assert err < 1e-10, f"k={k} lam={lam}: {err}"


@pytest.mark.parametrize("lam", [0.5, 2.0, 31.5])
def test_gegenbauer_at_one_matches_scipy(lam):
    vals = oracles.gegenbauer_at_one(lam, 10)
    for k in range(11):
        want = float(scipy_special.eval_gegenbauer(k, lam, 1.0))
        assert abs(vals[k] - want) / max(1.0, abs(want)) < 1e-12


def test_gegenbauer_reduces_to_legendre_at_half():
    """C_k^{1/2} is exactly the Legendre family."""
    geg = oracles.gegenbauer_table(GRID, 0.5, 8)
    leg = oracles.legendre_table(GRID, 8)
    for k in range(9):
        assert np.max(np.abs(geg[k] - leg[k])) < 1e-12


def test_phi_scalar_samples():
    # q=2 (lam=1/2), weights all one, n=2:
    # phi(x) = 1 + x + R_2(x) with R_2 = (3x^2-1)/2 normalized by R_2(1)=1
    got = oracles.phi_scalar(0.5, [1.0, 1.0, 1.0], 2.0, 0.5)
    assert abs(got - 1.375) < 1e-15
    # gate cuts the k=2 term in half at n=1.5
    got = oracles.phi_scalar(0.5, [1.0, 1.0, 1.0], 1.5, 0.5)
    assert abs(got - (1.5 + 0.5 * (-0.125))) < 1e-15


def test_adamw_reference_hand_step():
    # scalar, g=1, lr=0.1, betas (0.9, 0.999), eps=1e-8, wd=0, t=1:
    # mhat=1, vhat=1 -> p -= 0.1 * 1/(1+1e-8)
    p, m, v = oracles.adamw_reference(
        np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0),
        1, 0.1, 0.9, 0.999, 1e-8, 0.0)
    assert abs(p - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-16
    assert abs(m - 0.1) < 1e-16 and abs(v - 0.001) < 1e-16


def test_softmax_np_uniform():
    assert np.allclose(oracles.softmax_np(np.zeros(4)), 0.25)


def test_rmsnorm_np_unit_rows():
    out = oracles.rmsnorm_np(np.ones((2, 4)), np.ones(4), 0.0)
    assert np.allclose(out, 1.0)
