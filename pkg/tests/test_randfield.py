from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from ttreliab.randfield import (
    CovarianceKernel,
    KLField,
    LognormalMarginal,
    covariance_check,
    kl_decompose,
    lumped_weights,
)


@pytest.fixture(scope="module")
def exp_basis():
    x = np.linspace(0.0, 1.0, 200)
    w = np.full(200, 1.0 / 199)
    w[[0, -1]] *= 0.5
    return kl_decompose(x, CovarianceKernel("exponential", 1.0, 0.05), 50, w)


def test_constant_kernel_rank_one():
    x = np.linspace(0.0, 1.0, 20)
    w = np.full(20, 0.05)
    b = kl_decompose(x, CovarianceKernel("constant", 0.3), 1, w)
    assert b.eigenvalues[0] == pytest.approx(0.09 * w.sum(), rel=1e-12)
    assert np.allclose(b.eigenvectors[:, 0], b.eigenvectors[0, 0], rtol=1e-10)
    assert b.eigenvectors[0, 0] > 0
    assert b.energy_fraction == pytest.approx(1.0, rel=1e-12)


def test_matches_generalised_eigensolver(exp_basis):
    b = exp_basis
    k = b.kernel(b.nodes)
    wm = np.diag(b.weights)
    lam = scipy.linalg.eigh(wm @ k @ wm, wm, eigvals_only=True)[::-1]
    assert np.allclose(b.eigenvalues, lam[:50], rtol=1e-8, atol=1e-12)
    assert b.energy_fraction == pytest.approx(lam[:50].sum() / lam.sum(), abs=1e-8)
    assert b.energy_fraction == pytest.approx(b.eigenvalues.sum() / b.trace, abs=1e-12)


def test_eigen_order_and_orthonormality(exp_basis):
    b = exp_basis
    assert np.all(b.eigenvalues > 0)
    assert np.all(np.diff(b.eigenvalues) <= 0)
    gram = b.eigenvectors.T @ (b.weights[:, None] * b.eigenvectors)
    assert np.max(np.abs(gram - np.eye(50))) < 1e-10
    k = b.kernel(b.nodes)
    resid = k @ (b.weights[:, None] * b.eigenvectors) - b.eigenvectors * b.eigenvalues
    assert np.max(np.abs(resid)) < 1e-10


def test_sign_convention(exp_basis):
    phi = exp_basis.eigenvectors
    for i in range(phi.shape[1]):
        j = np.flatnonzero(np.abs(phi[:, i]) > 1e-12)[0]
        assert phi[j, i] > 0


def test_bad_truncation():
    with pytest.raises(ValueError):
        kl_decompose(np.linspace(0, 1, 5), CovarianceKernel(), 6)
    with pytest.raises(ValueError):
        CovarianceKernel(ell=0.0)


def test_non_spd_warns():
    with pytest.warns(RuntimeWarning):
        b = kl_decompose(np.linspace(0, 1, 6), CovarianceKernel("constant"), 3)
    assert np.all(b.eigenvalues > 0)


def test_zero_coefficients_give_median():
    m = LognormalMarginal(0.52, 0.05)
    f = KLField(n_terms=4, mean=0.52, cv=0.05).fit(np.linspace(0, 1, 30))
    vals = f.transform(np.zeros(4))
    assert np.allclose(vals, np.exp(m.mu_g), rtol=0, atol=1e-15)
    assert np.allclose(vals, 0.52 * np.exp(-0.5 * m.sigma_g**2), rtol=1e-14)


def test_lognormal_parameters():
    m = LognormalMarginal(72.45, 0.05)
    assert np.exp(m.mu_g + 0.5 * m.sigma_g**2) == pytest.approx(72.45, rel=1e-14)
    assert np.sqrt(np.expm1(m.sigma_g**2)) == pytest.approx(0.05, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 30.0))
def test_realizations_positive(seed, scale):
    f = KLField(n_terms=5, mean=3.43, cv=0.05).fit(np.linspace(0, 1, 25))
    xi = scale * np.random.default_rng(seed).standard_normal((10, 5))
    assert np.all(f.transform(xi) > 0)


def test_moments_of_full_expansion():
    x = np.linspace(0.0, 1.0, 30)
    f = KLField(n_terms=30, mean=0.52, cv=0.05, ell=0.2).fit(x)
    xi = np.random.default_rng(0).standard_normal((100_000, 30))
    v = f.transform(xi)
    mean = v.mean(axis=0)
    cv = v.std(axis=0) / mean
    assert np.all(np.abs(mean / 0.52 - 1.0) < 0.01)
    assert np.all(np.abs(cv / 0.05 - 1.0) < 0.1)


def test_linearity(exp_basis):
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 50))
    g = exp_basis.gaussian_part
    assert np.allclose(g(2.0 * a - 3.0 * b), 2.0 * g(a) - 3.0 * g(b), rtol=0, atol=1e-12)


def test_covariance_check_full_expansion():
    x = np.linspace(0.0, 1.0, 30)
    b = kl_decompose(x, CovarianceKernel("exponential", 1.0, 0.2), 30)
    n = 100_000
    assert covariance_check(b, n, seed=2) < 5.0 * np.sqrt(2.0 / n)


def test_covariance_check_constant_kernel():
    b = kl_decompose(np.linspace(0, 1, 10), CovarianceKernel("constant", 1.0), 1)
    assert covariance_check(b, 100_000, seed=3) < 5.0 * np.sqrt(2.0 / 100_000)


def test_covariance_truncated_at_95_percent(exp_basis):
    b = exp_basis
    full = kl_decompose(b.nodes, b.kernel, 200, b.weights)
    m = int(np.searchsorted(np.cumsum(full.eigenvalues) / full.trace, 0.95) + 1)
    trunc = kl_decompose(b.nodes, b.kernel, m, b.weights)
    n = 100_000
    xi = np.random.default_rng(4).standard_normal((n, m))
    g = trunc.gaussian_part(xi)
    emp = g.T @ g / n
    resid = b.kernel(b.nodes) - trunc.truncated_covariance()
    # on average 5% of the variance is discarded; boundary nodes lose more
    assert np.average(np.diag(resid), weights=b.weights) == pytest.approx(
        1.0 - trunc.energy_fraction, abs=0.01)
    err = np.max(np.abs(emp - b.kernel(b.nodes)))
    assert err <= np.max(np.abs(resid)) + 3.0 * np.sqrt(2.0 / n)
    assert covariance_check(trunc, 10_000, seed=4) < 5.0 * np.sqrt(2.0 / 10_000)


def test_klfield_round_trip_and_params():
    x = np.linspace(0, 1, 12)
    f = KLField(n_terms=12, mean=50.0, cv=0.05, ell=0.3).fit(x)
    xi = np.random.default_rng(5).standard_normal(12)
    assert np.allclose(f.inverse_transform(f.transform(xi)), xi, atol=1e-9)
    assert f.get_params()["n_terms"] == 12
    with pytest.raises(ValueError):
        f.set_params(bogus=1)
    with pytest.raises(RuntimeError):
        KLField().transform(np.zeros(4))


def test_lumped_weights_sum_to_area():
    nodes = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    elems = np.array([[0, 1, 2], [0, 2, 3]])
    w = lumped_weights(nodes, elems)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] == pytest.approx(1.0 / 3.0)
