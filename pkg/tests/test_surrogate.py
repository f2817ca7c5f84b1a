from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from ttreliab.micromech import (
    PhaseProperties,
    batch_bounds,
    generate_dataset,
    voigt_reuss_bounds,
)
from ttreliab.surrogate import (
    TrainingConfig,
    TrainingDivergedError,
    VRNN,
    VRNNRegressor,
    expm,
    expm_adjoint,
    loss,
    loss_grad,
    moving_average,
    normalize,
    normalized_targets,
    orthogonal_from_params,
    r2_per_component,
    reconstruct,
    reconstruct_from_normalized,
    train,
    moving_average_rises,
    trend_excess,
)


def min_eig(a):
    return np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2))).min(axis=-1)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(30, resolution=16, seed=1, m=4)


@pytest.fixture(scope="module")
def bounds():
    return voigt_reuss_bounds(PhaseProperties(72.45, 3.43), 0.52, m=4)


# -- codec -----------------------------------------------------------------------


def test_normalize_endpoints(bounds):
    assert np.allclose(normalize(bounds.C_V, bounds), 0.0, atol=1e-14)
    assert np.allclose(normalize(bounds.C_R, bounds), np.eye(4), atol=1e-7)


def test_codec_round_trip_on_records(dataset):
    for k in range(len(dataset)):
        b = dataset.bounds(k)
        back = reconstruct_from_normalized(normalize(dataset.C_hom[k], b), b)
        assert np.linalg.norm(back - dataset.C_hom[k]) <= 1e-10 * np.linalg.norm(dataset.C_hom[k])


def test_normalized_targets_in_unit_interval(dataset):
    lam = np.linalg.eigvalsh(normalized_targets(dataset))
    assert lam.min() >= -1e-6 and lam.max() <= 1 + 1e-6


def test_orthogonal_examples():
    assert np.array_equal(orthogonal_from_params(np.zeros(6), 4), np.eye(4))
    q = orthogonal_from_params([np.pi / 2], 2)
    assert np.allclose(q, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 20.0))
def test_orthogonal_contract(seed, scale):
    xi = scale * np.random.default_rng(seed).standard_normal(6)
    q = orthogonal_from_params(xi, 4)
    assert np.linalg.norm(q.T @ q - np.eye(4)) < 1e-12
    assert abs(np.linalg.det(q) - 1.0) < 1e-10


def test_expm_matches_scipy():
    from scipy.linalg import expm as scipy_expm

    a = np.random.default_rng(0).standard_normal((5, 4, 4)) * 2
    assert np.allclose(expm(a), np.array([scipy_expm(x) for x in a]), rtol=1e-12, atol=1e-12)


def test_expm_adjoint_matches_frechet():
    from scipy.linalg import expm_frechet

    rng = np.random.default_rng(1)
    a, g, e = rng.standard_normal((3, 4, 4))
    lhs = np.sum(expm_adjoint(a, g) * e)
    rhs = np.sum(g * expm_frechet(a, e, compute_expm=False))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_reconstruct_endpoints(bounds):
    assert np.allclose(reconstruct(np.zeros(6), np.full(4, 1e-16), bounds), bounds.C_V, rtol=1e-12)
    c = reconstruct(np.zeros(6), np.ones(4), bounds)
    assert np.allclose(c, bounds.C_R, atol=10 * bounds.eps_floor + 1e-12)


def test_reconstruct_enclosure_random():
    rng = np.random.default_rng(2)
    n = 10_000
    chi = np.column_stack([rng.uniform(0.4, 0.7, n), rng.uniform(50, 80, n), rng.uniform(2, 5, n)])
    c_v, c_r, L, _ = batch_bounds(chi, m=4)
    from ttreliab.surrogate import normalized_from_params

    ct = normalized_from_params(3 * rng.standard_normal((n, 6)), rng.random((n, 4)), 4)
    c = c_v - L @ ct @ np.swapaxes(L, 1, 2)
    tol = -1e-8 * np.linalg.norm(c_v, 2, axis=(1, 2))
    assert np.all(min_eig(c_v - c) >= tol)
    assert np.all(min_eig(c - c_r) >= tol)


# -- loss ------------------------------------------------------------------------


def test_loss_examples():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((5, 3, 3))
    assert loss(t, t) == 0.0
    assert loss(t + 0.2 * np.eye(3), t) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        loss(t, t[:2])


def test_loss_gradient_fd():
    rng = np.random.default_rng(4)
    for _ in range(10):
        p, t = rng.standard_normal((2, 6, 4, 4))
        _, g = loss_grad(p, t)
        e = rng.standard_normal(p.shape)
        h = 1e-6
        fd = (loss(p + h * e, t) - loss(p - h * e, t)) / (2 * h)
        assert fd == pytest.approx(np.sum(g * e), rel=1e-5)


# -- network ---------------------------------------------------------------------


def test_full_gradient_fd(dataset):
    net = VRNN.initialise(4, (16, 16), seed=5)
    x = net.standardize(dataset.chi)
    t = normalized_targets(dataset)
    _, grads = net.loss_and_grad(x, t)
    rng = np.random.default_rng(6)
    params = net.params()
    for _ in range(10):
        d = [rng.standard_normal(p.shape) for p in params]
        h = 1e-6
        for p, dd in zip(params, d):
            p += h * dd
        lp = net.loss_and_grad(x, t)[0]
        for p, dd in zip(params, d):
            p -= 2 * h * dd
        lm = net.loss_and_grad(x, t)[0]
        for p, dd in zip(params, d):
            p += h * dd
        an = sum(np.sum(g * dd) for g, dd in zip(grads, d))
        assert (lp - lm) / (2 * h) == pytest.approx(an, rel=1e-5)


def test_untrained_predictions_respect_bounds():
    net = VRNN.initialise(4, seed=7)
    rng = np.random.default_rng(8)
    n = 2000
    chi = np.column_stack([rng.uniform(0.0, 1.0, n), rng.uniform(10, 150, n), rng.uniform(0.5, 10, n)])
    for scale in (1.0, 30.0):
        net.weights[-1] *= scale
        c = net.predict(chi)
        c_v, c_r, _, _ = batch_bounds(chi, 4)
        tol = -1e-8 * np.linalg.norm(c_v, 2, axis=(1, 2))
        assert np.all(min_eig(c_v - c) >= tol)
        assert np.all(min_eig(c - c_r) >= tol)
        assert np.max(np.abs(c - np.swapaxes(c, 1, 2))) <= 1e-10 * np.abs(c).max()


def test_equal_phase_collapse():
    from ttreliab.micromech import isotropic_stiffness

    net = VRNN.initialise(4, seed=9, nu_f=0.3, nu_m=0.3)
    c = net.predict([[0.5, 4.0, 4.0], [0.6, 4.0, 4.0]])
    assert np.allclose(c, isotropic_stiffness(4.0, 0.3, 4), rtol=1e-12, atol=1e-12)


def test_zero_epochs_returns_initial(dataset):
    net, hist = train(dataset, TrainingConfig(epochs=0, hidden=(8,), seed=3))
    init = VRNN.initialise(4, (8,), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), init.params()))
    assert hist.train == [] and hist.validation == []


def test_short_training_improves_and_is_deterministic(dataset):
    cfg = TrainingConfig(learning_rate=1e-3, epochs=300, hidden=(16, 16), seed=1)
    net, hist = train(dataset, cfg)
    assert hist.train[-1] < 0.5 * hist.train[0]
    assert len(hist.validation) == 300
    net2, hist2 = train(dataset, cfg)
    assert hist2.train == hist.train
    assert np.array_equal(net2.predict(dataset.chi), net.predict(dataset.chi))


def test_divergence_reports_epoch(dataset):
    bad = generate_dataset(5, resolution=8, seed=0, m=4)
    bad.C_hom[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as err:
        train(bad, TrainingConfig(epochs=5, hidden=(4,)))
    assert err.value.epoch == 1


def test_save_load_bit_exact(tmp_path):
    net = VRNN.initialise(4, (8, 8), seed=10)
    net.save(tmp_path / "m.bin")
    back = VRNN.load(tmp_path / "m.bin")
    chi = np.array([[0.52, 72.45, 3.43], [0.8, 60.0, 3.0]])
    assert np.array_equal(back.predict(chi), net.predict(chi))
    assert back.layer_sizes == [3, 8, 8, 10]


def test_moving_average_and_trend():
    assert np.allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert trend_excess(np.linspace(2, 1, 3000)) == 0.0
    x = np.linspace(2, 1, 3000)
    x[2000:] = 1.5
    assert trend_excess(x) > 0.1


def test_moving_average_rises_counts_block_increases():
    x = np.linspace(2, 1, 3000)
    assert moving_average_rises(x) == 0
    x[2000:2100] = 3.0
    assert moving_average_rises(x) == 1
    # sliding windows see the same bump as a run of rises
    assert moving_average_rises(x, stride=1) == 100


def test_r2_marks_constant_components():
    rng = np.random.default_rng(0)
    true = rng.standard_normal((20, 2, 2))
    true[:, 0, 1] = true[:, 1, 0] = 0.0
    r2 = r2_per_component(true, true)
    assert np.isnan(r2[1]) and r2[0] == 1.0 and r2[2] == 1.0


def test_sklearn_wrapper(dataset):
    iu = np.triu_indices(4)
    y = dataset.C_hom[:, iu[0], iu[1]]
    reg = VRNNRegressor(hidden=(8,), epochs=50, learning_rate=1e-3)
    assert clone(reg).get_params()["epochs"] == 50
    reg.fit(dataset.chi, y)
    assert reg.predict(dataset.chi).shape == y.shape
    assert np.isfinite(reg.score(dataset.chi, y))
    with pytest.raises(RuntimeError):
        VRNNRegressor().predict(dataset.chi)
    with pytest.raises(ValueError):
        reg.fit(dataset.chi[:, :2], y)
