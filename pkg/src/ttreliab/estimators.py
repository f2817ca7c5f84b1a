"""Failure-probability estimators: plain Monte Carlo, importance sampling with
transport maps, the posterior ratio estimator and a rejection reference.

Failure is ``g(theta) = threshold - F(theta) <= 0``. All estimators draw their
randomness from ``numpy.random.default_rng(seed)`` in a fixed order, so two
estimators that share a seed also share the sample stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class DegenerateWeightsError(ValueError):
    pass


class DegenerateEvidenceError(ValueError):
    pass


class SupportViolationError(FloatingPointError):
    pass


def standard_normal_logpdf(theta: np.ndarray) -> np.ndarray:
    theta = np.atleast_2d(theta)
    return np.sum(-0.5 * theta**2 - _LOG_SQRT_2PI, axis=1)


@dataclass(frozen=True, eq=False)
class ReliabilityProblem:
    """A structural reliability problem on a ``d``-dimensional parameter.

    Parameters
    ----------
    dim : int
    qoi : callable
        ``F(theta)`` for ``theta`` of shape ``(N, d)``; ``nan`` marks a failed
        model evaluation.
    threshold : float
        Allowable value of ``F``.
    log_prior : callable, optional
        Normalised log prior density; the standard normal by default.
    log_likelihood : callable, optional
        Unnormalised log likelihood of the data.
    response : callable, optional
        Returns ``(F, log_likelihood)`` from a single model solve. When given
        it is used instead of separate ``qoi`` and ``log_likelihood`` calls.
    sample_prior : callable, optional
        ``(rng, n) -> (n, d)``; standard normal draws by default.
    likelihood_in_response : bool
        Whether ``response`` returns a likelihood (rather than ``None``).
    """

    dim: int
    qoi: Callable[[np.ndarray], np.ndarray] | None
    threshold: float
    log_prior: Callable[[np.ndarray], np.ndarray] = standard_normal_logpdf
    log_likelihood: Callable[[np.ndarray], np.ndarray] | None = None
    response: Callable[[np.ndarray], tuple] | None = None
    sample_prior: Callable[[np.random.Generator, int], np.ndarray] | None = None
    likelihood_in_response: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if self.qoi is None and self.response is None:
            raise ValueError("either qoi or response must be given")

    @property
    def has_likelihood(self) -> bool:
        if self.response is not None:
            return self.likelihood_in_response
        return self.log_likelihood is not None

    def draw_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.sample_prior is not None:
            return np.asarray(self.sample_prior(rng, n), dtype=float)
        return rng.standard_normal((n, self.dim))

    def evaluate(self, theta: np.ndarray, need_likelihood: bool = True):
        """``(F, log L)``; ``log L`` is ``None`` without a likelihood."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if self.response is not None:
            f, ll = self.response(theta)
            return np.asarray(f, dtype=float), None if ll is None else np.asarray(ll, dtype=float)
        f = np.asarray(self.qoi(theta), dtype=float)
        ll = None
        if need_likelihood and self.log_likelihood is not None:
            ll = np.asarray(self.log_likelihood(theta), dtype=float)
        return f, ll

    def performance(self, theta) -> np.ndarray:
        return self.threshold - self.evaluate(theta, need_likelihood=False)[0]

    def indicator(self, theta) -> np.ndarray:
        return self.performance(theta) <= 0.0


@dataclass
class EstimateReport:
    p_hat: float
    cov: float
    ess: float
    n_samples: int
    n_model_evals: int
    seed: int
    mode: str
    n_failed: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("p_hat", "cov", "ess", "n_samples", "n_model_evals", "seed", "mode", "n_failed")}
        out.update({k: v for k, v in self.extra.items() if np.isscalar(v) or v is None})
        return out


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float).ravel()
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    s2 = float(np.sum(w**2))
    if s2 == 0.0:
        raise DegenerateWeightsError("all weights are zero")
    return float(np.sum(w)) ** 2 / s2


def log_ess_fraction(log_w) -> float:
    """ESS fraction from log weights, stable against overflow."""
    log_w = np.asarray(log_w, dtype=float)
    log_w = log_w[np.isfinite(log_w)] if np.any(np.isfinite(log_w)) else log_w
    if log_w.size == 0 or not np.any(np.isfinite(log_w)):
        return 0.0
    w = np.exp(log_w - log_w.max())
    return ess(w) / log_w.size


def required_samples(pf: float, target_cov: float) -> int:
    """Monte Carlo sample size reaching ``target_cov`` for probability ``pf``."""
    if not 0.0 < pf <= 1.0:
        raise ValueError("pf must be in (0, 1]")
    if not target_cov > 0:
        raise ValueError("target CoV must be positive")
    return int(math.ceil((1.0 - pf) / (target_cov**2 * pf) - 1e-9))


def mc_cov(pf: float, n: int) -> float:
    """Binomial coefficient of variation of the Monte Carlo estimate."""
    if pf <= 0.0:
        return math.inf
    return math.sqrt((1.0 - pf) / (n * pf))


def _valid(f: np.ndarray, ll: np.ndarray | None):
    ok = np.isfinite(f)
    if ll is not None:
        ok &= ~np.isnan(ll) & (ll < np.inf)
    return ok


def mc_prior(problem: ReliabilityProblem, n: int, seed: int = 0) -> EstimateReport:
    """Crude Monte Carlo under the prior."""
    if n < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng(seed)
    theta = problem.draw_prior(rng, n)
    f, _ = problem.evaluate(theta, need_likelihood=False)
    ok = np.isfinite(f)
    m = int(ok.sum())
    fail = (problem.threshold - f[ok]) <= 0.0
    p = float(fail.mean()) if m else math.nan
    return EstimateReport(p, mc_cov(p, m) if m else math.inf, float(m), n, n, seed, "prior-MC",
                          n_failed=n - m)


def is_prior(problem: ReliabilityProblem, transport, n: int, seed: int = 0) -> EstimateReport:
    """Importance sampling with a transport-map biasing density.

    ``transport`` needs ``sample(n, seed) -> (theta, log_density, ok)``.
    """
    theta, log_q, ok_t = transport.sample(n, seed)
    f, _ = problem.evaluate(theta, need_likelihood=False)
    log_w = problem.log_prior(theta) - log_q
    ok = ok_t & np.isfinite(f)
    if not np.all(np.isfinite(log_w[ok])):
        raise SupportViolationError("non-finite importance weight")
    w = np.exp(log_w[ok])
    y = w * ((problem.threshold - f[ok]) <= 0.0)
    m = y.size
    p = float(y.mean()) if m else math.nan
    cov = float(y.std() / (p * math.sqrt(m))) if p > 0 else math.inf
    return EstimateReport(p, cov, ess(w), n, n, seed, "prior-IS", n_failed=n - m,
                          extra={"ess_fraction": ess(w) / m})


def _sub_seeds(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def is_posterior_ratio(problem: ReliabilityProblem, p_map, q_map, n: int, seed: int = 0,
                       n_boot: int = 500, n_q: int | None = None) -> EstimateReport:
    """Ratio of two importance-sampling estimators for ``P(failure | y)``.

    ``p_map`` should target ``I_F L pi``, ``q_map`` the posterior ``L pi``.
    The numerator uses the same stream as :func:`is_prior` with ``seed``.
    The CoV comes from a nonparametric bootstrap over both sample sets.
    """
    if not problem.has_likelihood:
        raise ValueError("the ratio estimator needs a likelihood")
    n_q = n if n_q is None else n_q
    th_p, lq_p, ok_p = p_map.sample(n, seed)
    q_seed = int(np.random.SeedSequence(seed).spawn(1)[0].generate_state(1)[0])
    th_q, lq_q, ok_q = q_map.sample(n_q, q_seed)
    f_p, ll_p = problem.evaluate(th_p)
    _, ll_q = problem.evaluate(th_q)
    okp = ok_p & _valid(f_p, ll_p)
    okq = ok_q & _valid(np.zeros(n_q), ll_q)
    lw_p = ll_p[okp] + problem.log_prior(th_p[okp]) - lq_p[okp]
    lw_q = ll_q[okq] + problem.log_prior(th_q[okq]) - lq_q[okq]
    if np.any(np.isnan(lw_p)) or np.any(np.isnan(lw_q)):
        raise SupportViolationError("non-finite importance weight")
    shift = max(lw_p.max(initial=-np.inf), lw_q.max(initial=-np.inf))
    if not np.isfinite(shift):
        raise DegenerateEvidenceError("all posterior weights vanish")
    w_p = np.exp(lw_p - shift) * ((problem.threshold - f_p[okp]) <= 0.0)
    w_q = np.exp(lw_q - shift)
    num, den = w_p.mean(), w_q.mean()
    if den == 0.0:
        raise DegenerateEvidenceError("evidence estimate is zero")
    p = float(num / den)

    boot_rng = _sub_seeds(seed, 2)[1]
    ratios = np.empty(n_boot)
    for b in range(n_boot):
        ip = boot_rng.integers(0, w_p.size, w_p.size)
        iq = boot_rng.integers(0, w_q.size, w_q.size)
        dq = w_q[iq].mean()
        ratios[b] = w_p[ip].mean() / dq if dq > 0 else np.nan
    ratios = ratios[np.isfinite(ratios)]
    cov = float(ratios.std(ddof=1) / p) if p > 0 and ratios.size > 1 else math.inf
    # first-order (delta method) CoV for comparison
    cv_p = w_p.std() / (num * math.sqrt(w_p.size)) if num > 0 else math.inf
    cv_q = w_q.std() / (den * math.sqrt(w_q.size))
    ess_q = ess(w_q) if np.any(w_q > 0) else 0.0
    return EstimateReport(
        p, cov, ess_q, n + n_q, n + n_q, seed, "posterior-ratio",
        n_failed=int((~okp).sum() + (~okq).sum()),
        extra={"cov_delta": float(math.hypot(cv_p, cv_q)), "numerator": float(num),
               "denominator": float(den), "log_scale": float(shift),
               "ess_fraction_q": ess_q / max(w_q.size, 1)},
    )


def rejection_posterior_reference(problem: ReliabilityProblem, n_prop: int, batch: int = 10_000,
                                  seed: int = 0, n_probe: int = 1000, inflation: float = 10.0,
                                  log_lmax: float | None = None) -> EstimateReport:
    """Posterior failure probability by rejection sampling from the prior.

    The likelihood bound is the largest value on ``n_probe`` prior probes,
    inflated by ``inflation``. Proposals whose likelihood exceeds the bound
    are counted in ``extra["n_exceed"]``.
    """
    if not problem.has_likelihood:
        raise ValueError("rejection needs a likelihood")
    probe_rng, rng = _sub_seeds(seed, 2)
    n_evals = 0
    if log_lmax is None:
        _, ll = problem.evaluate(problem.draw_prior(probe_rng, n_probe))
        n_evals += n_probe
        ll = ll[np.isfinite(ll)]
        if ll.size == 0:
            raise DegenerateEvidenceError("likelihood not finite on any probe")
        log_lmax = float(ll.max()) + math.log(inflation)
    n_acc = n_fail_set = n_bad = n_exceed = 0
    sum_l = 0.0
    trace = []
    done = 0
    while done < n_prop:
        m = min(batch, n_prop - done)
        theta = problem.draw_prior(rng, m)
        u = rng.random(m)
        f, ll = problem.evaluate(theta)
        n_evals += m
        ok = _valid(f, ll)
        n_bad += int((~ok).sum())
        n_exceed += int(np.sum(ll[ok] > log_lmax))
        sum_l += float(np.sum(np.exp(np.minimum(ll[ok], 0.0))))
        acc = ok.copy()
        acc[ok] = np.log(u[ok]) < ll[ok] - log_lmax
        n_acc += int(acc.sum())
        n_fail_set += int(np.sum((problem.threshold - f[acc]) <= 0.0))
        done += m
        trace.append((done, n_acc, n_fail_set / n_acc if n_acc else math.nan))
    defined = n_acc > 0
    p = n_fail_set / n_acc if defined else math.nan
    cov = mc_cov(p, n_acc) if defined else math.inf
    return EstimateReport(
        p, cov, float(n_acc), n_prop, n_evals, seed, "posterior-rejection", n_failed=n_bad,
        extra={"p_defined": defined, "acceptance_rate": n_acc / max(n_prop - n_bad, 1),
               "n_accepted": n_acc, "log_lmax": log_lmax, "n_exceed": n_exceed,
               # acceptance rate the same sampler would have with the bound L <= 1
               "unit_bound_acceptance": sum_l / max(n_prop - n_bad, 1),
               "trace": np.array(trace, dtype=float)},
    )


def multi_run(estimator: Callable[..., EstimateReport], seeds, *args, **kwargs) -> dict:
    """Run an estimator for several seeds; returns the mean and the run-to-run CoV."""
    reports = [estimator(*args, seed=int(s), **kwargs) for s in seeds]
    vals = np.array([r.p_hat for r in reports])
    mean = float(vals.mean())
    spread = float(vals.std(ddof=1) / mean) if len(vals) > 1 and mean > 0 else math.nan
    return {"mean": mean, "run_to_run_cov": spread,
            "within_run_cov": float(np.mean([r.cov for r in reports])), "reports": reports}


def linear_problem(dim: int, beta: float, threshold: float = 1.0) -> ReliabilityProblem:
    """``F = threshold (1 + sum(xi) / sqrt(d) - beta)``; failure probability ``Phi(-beta)``."""

    def qoi(theta):
        theta = np.atleast_2d(theta)
        return threshold * (1.0 + theta.sum(axis=1) / math.sqrt(dim) - beta)

    return ReliabilityProblem(dim, qoi, threshold)
