from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy.stats import norm

from ttreliab.dirt import (
    BridgingSchedule,
    DeepTransport,
    LayerBuildError,
    ScheduleError,
    SmoothedIndicator,
    bridging_logdensity,
    build,
    layer_log_ratios,
    push_samples,
)
from ttreliab.estimators import ReliabilityProblem, ess, is_prior, linear_problem
from ttreliab.sirt import Reference
from ttreliab.tt import CrossConfig


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def conjugate_problem():
    return ReliabilityProblem(1, lambda t: t[:, 0], 2.0,
                              log_likelihood=lambda t: -0.5 * (1.0 - t[:, 0]) ** 2)


@pytest.fixture(scope="module")
def conjugate_map():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build(conjugate_problem(), BridgingSchedule("tempering", betas=(1.0,)),
                     CrossConfig(max_rank=5))


@pytest.fixture(scope="module")
def tempered_2d():
    prob = ReliabilityProblem(
        2, lambda t: t[:, 0], 3.0,
        log_likelihood=lambda t: -0.5 * ((t[:, 0] + t[:, 1] - 1.0) / 0.5) ** 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return prob, build(prob, BridgingSchedule("tempering", adaptive=True),
                           CrossConfig(max_rank=10, rel_tolerance=1e-6), n_ess=2000)


# -- smoothed indicator and schedule --------------------------------------------


def test_sigmoid_range_and_sharpening():
    f = np.array([0.5, 0.9, 1.0, 1.1, 2.0])
    vals = [SmoothedIndicator(g, 1.0)(f) for g in (1.0, 5.0, 50.0, 500.0)]
    for v in vals:
        assert np.all((v > 0) & (v < 1) | (v == 1.0))
    dist = [np.abs(v - (f > 1.0)) for v in vals]
    for a, b in zip(dist[:-1], dist[1:]):
        mask = f != 1.0
        assert np.all(b[mask] <= a[mask] + 1e-15)


def test_sigmoid_is_dimensionless():
    a = SmoothedIndicator(10.0, 1.0)(np.array([1.2]))
    b = SmoothedIndicator(10.0, 500.0)(np.array([600.0]))
    assert a == pytest.approx(b)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        BridgingSchedule("tempering", betas=(0.5, 0.3, 1.0))
    with pytest.raises(ScheduleError):
        BridgingSchedule("tempering", betas=(0.5,))
    with pytest.raises(ScheduleError):
        BridgingSchedule("smoothed-indicator", gammas=(5.0, 2.0))
    with pytest.raises(ScheduleError):
        BridgingSchedule("other", gammas=(1.0,))
    g = BridgingSchedule.geometric_gammas(50.0, 12)
    assert g[-1] == 50.0 and g[0] == pytest.approx(50.0 / 2**11)
    assert np.all(np.diff(g) > 0)


def test_schedule_must_match_problem():
    with pytest.raises(ScheduleError):
        build(linear_problem(2, 2.0), BridgingSchedule("tempering", betas=(1.0,)))


# -- bridging densities -----------------------------------------------------------


def test_bridging_tempering_endpoints():
    prob = conjugate_problem()
    th = np.array([[-1.0], [0.3], [2.5]])
    s0 = BridgingSchedule("tempering", betas=(0.0, 1.0))
    assert np.allclose(bridging_logdensity(prob, s0, 1, th), prob.log_prior(th))
    assert np.allclose(bridging_logdensity(prob, s0, 2, th),
                       prob.log_prior(th) + prob.log_likelihood(th))


def test_bridging_indicator_saturates():
    prob = linear_problem(2, 1.0)
    s = BridgingSchedule("smoothed-indicator", gammas=(1e6,))
    th = np.array([[2.0, 2.0]])
    assert bridging_logdensity(prob, s, 1, th) == pytest.approx(prob.log_prior(th))


# -- build and push ----------------------------------------------------------------


def test_identity_transport():
    t = DeepTransport(3)
    r = np.random.default_rng(0).standard_normal((10, 3))
    th, logp, ok = push_samples(t, r)
    assert np.array_equal(th, r)
    assert np.allclose(logp, Reference().log_pdf(r))
    assert ok.all()


def test_reference_target_gives_near_identity_layer():
    prob = ReliabilityProblem(3, lambda t: t[:, 0], 5.0,
                              log_likelihood=lambda t: np.zeros(t.shape[0]))
    t = build(prob, BridgingSchedule("tempering", betas=(1.0,)), CrossConfig(max_rank=4))
    th, logp, _ = t.sample(10_000, 1)
    w = np.exp(prob.log_prior(th) - logp)
    assert w.std() / w.mean() < 0.05


def test_conjugate_posterior_moments(conjugate_map):
    th, _, ok = conjugate_map.sample(100_000, 1)
    assert ok.all()
    n = th.shape[0]
    assert abs(th.mean() - 0.5) < 3 * np.sqrt(0.5 / n)
    assert abs(th.var() - 0.5) < 3 * 0.5 * np.sqrt(2.0 / n)


def test_conjugate_hellinger_and_ess(conjugate_map):
    th, logp, _ = conjugate_map.sample(10_000, 2)
    lpost = norm.logpdf(th[:, 0], 0.5, np.sqrt(0.5))
    hell2 = 1.0 - np.mean(np.exp(0.5 * (lpost - logp)))
    assert np.sqrt(max(hell2, 0.0)) < 0.05
    assert ess(np.exp(lpost - logp)) / th.shape[0] > 0.8


def test_small_linear_rare_event():
    prob = linear_problem(4, 3.0)
    t = build(prob, BridgingSchedule.prior_failure(50.0, 6),
              CrossConfig(max_rank=8, max_sweeps=3, init_rank=3, rel_tolerance=1e-3))
    rep = is_prior(prob, t, 10_000, seed=3)
    assert abs(rep.p_hat - norm.cdf(-3.0)) < 3 * rep.cov * rep.p_hat
    assert rep.cov < 0.05
    assert len(t.diagnostics) == 6
    assert all(d.n_model_evals > 0 for d in t.diagnostics)


def test_layer_ratio_bounded_on_fine_ladder():
    prob = linear_problem(4, 3.0)
    sched = BridgingSchedule("smoothed-indicator",
                             gammas=(1.0, 2.0, 4.0, 8.0, 14.0, 20.0, 26.0, 32.0, 38.0, 44.0, 50.0))
    t = build(prob, sched, CrossConfig(max_rank=6, max_sweeps=2, init_rank=3), n_ess=0)
    ratios = layer_log_ratios(prob, t, n_probe=1000)
    assert ratios.shape == (10,)
    assert np.all(ratios <= 20.0)


def test_layer_ratio_flags_coarse_ladder():
    prob = linear_problem(4, 3.0)
    t = build(prob, BridgingSchedule("smoothed-indicator", gammas=(1.0, 50.0)),
              CrossConfig(max_rank=6, max_sweeps=2, init_rank=3), n_ess=0)
    assert layer_log_ratios(prob, t)[0] > 20.0


def test_pushforward_density_matches_jacobian(tempered_2d):
    _, t = tempered_2d
    r = np.random.default_rng(3).standard_normal((5, 2))
    th, logp, _ = t.push(r)
    h = 1e-6
    for i in range(5):
        jac = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            jac[:, k] = (t.push((r[i] + e)[None])[0][0] - t.push((r[i] - e)[None])[0][0]) / (2 * h)
        expect = Reference().log_pdf(r[i]) - np.log(abs(np.linalg.det(jac)))
        assert logp[i] == pytest.approx(expect, abs=1e-4)


def test_pull_inverts_push(tempered_2d):
    _, t = tempered_2d
    r = np.random.default_rng(4).standard_normal((50, 2))
    th, logp, _ = t.push(r)
    back, logp2 = t.pull(th)
    assert np.allclose(back, r, atol=1e-8)
    assert np.allclose(logp2, logp, atol=1e-8)


def test_adaptive_betas_monotone(tempered_2d):
    prob, t = tempered_2d
    betas = [d.beta for d in t.diagnostics]
    assert np.all(np.diff(betas) > 0)
    assert betas[-1] == 1.0
    assert len(betas) >= 2
    th, logp, _ = t.sample(5000, 9)
    lw = prob.log_likelihood(th) + prob.log_prior(th) - logp
    assert ess(np.exp(lw - lw.max())) / 5000 > 0.5


def test_require_convergence_raises():
    prob = linear_problem(3, 2.0)
    with pytest.raises(LayerBuildError) as err:
        build(prob, BridgingSchedule.prior_failure(50.0, 2),
              CrossConfig(rel_tolerance=1e-12, max_rank=2, max_sweeps=2), require_convergence=True)
    assert err.value.layer == 1


def test_combined_reuses_posterior_layers(conjugate_map):
    prob = conjugate_problem()
    sched = BridgingSchedule("combined", betas=(1.0,), gammas=(12.5, 25.0, 50.0))
    p = build(prob, sched, CrossConfig(max_rank=5), base=conjugate_map)
    assert p.n_layers == conjugate_map.n_layers + 3
    assert p.layers[0] is conjugate_map.layers[0]
    assert [d.gamma for d in p.diagnostics[1:]] == [12.5, 25.0, 50.0]
