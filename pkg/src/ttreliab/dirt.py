"""Deep inverse Rosenblatt transport (DIRT) driven by bridging densities.

A transport ``T = Q_1 o Q_2 o ... o Q_K`` is assembled layer by layer. Layer
``k`` is a squared-FTT density on the reference space that approximates the
pullback of the ``k``-th bridging density under the first ``k - 1`` layers.
Bridging densities are

    phi_k(theta) = f(theta; gamma_k) * prior(theta) * L(theta)**beta_k

with ``f`` a sigmoid-smoothed failure indicator (omitted for pure tempering)
and ``beta_k = 0`` when no likelihood takes part.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .estimators import ReliabilityProblem, log_ess_fraction
from .sirt import Basis1D, Reference, SquaredFTTDensity, build_sqrt_approx
from .tt import CrossConfig

logger = logging.getLogger(__name__)

KINDS = ("tempering", "smoothed-indicator", "combined")


class ScheduleError(ValueError):
    pass


class LayerBuildError(RuntimeError):
    def __init__(self, layer: int, message: str, diagnostics=None):
        self.layer = layer
        self.diagnostics = diagnostics
        super().__init__(f"layer {layer}: {message}")


@dataclass(frozen=True)
class SmoothedIndicator:
    """``f = 1 / (1 + exp(-gamma (F / threshold - 1)))``.

    ``F`` and the threshold are both divided by the threshold so ``gamma`` is
    dimensionless.
    """

    gamma: float
    threshold: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")

    def log_value(self, f) -> np.ndarray:
        x = self.gamma * (np.asarray(f, dtype=float) / self.threshold - 1.0)
        return -np.logaddexp(0.0, -x)

    def __call__(self, f) -> np.ndarray:
        return np.exp(self.log_value(f))


@dataclass(frozen=True)
class BridgingSchedule:
    """Sequence of bridging densities.

    ``tempering`` uses ``betas`` only; ``smoothed-indicator`` uses ``gammas``
    only; ``combined`` runs the ``betas`` ladder first and then the
    ``gammas`` ladder at ``beta = 1``. With ``adaptive`` the ``betas`` are
    chosen during the build (at most ``max_tempering_layers``) so that the
    incremental importance weights keep an ESS fraction of ``ess_target``.
    """

    kind: str
    betas: tuple[float, ...] = ()
    gammas: tuple[float, ...] = ()
    adaptive: bool = False
    ess_target: float = 0.5
    max_tempering_layers: int = 12

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.ess_target < 1.0:
            raise ScheduleError("ess_target must lie in (0, 1)")
        b, g = np.array(self.betas), np.array(self.gammas)
        if b.size and (np.any(np.diff(b) <= 0) or b[0] < 0 or b[-1] != 1.0):
            raise ScheduleError("betas must increase strictly and end at 1")
        if g.size and (np.any(np.diff(g) <= 0) or g[0] <= 0):
            raise ScheduleError("gammas must be positive and strictly increasing")
        if self.kind == "tempering" and (g.size or (not b.size and not self.adaptive)):
            raise ScheduleError("a tempering schedule needs betas (or adaptive) and no gammas")
        if self.kind == "smoothed-indicator" and (b.size or not g.size or self.adaptive):
            raise ScheduleError("a smoothed-indicator schedule needs gammas only")
        if self.kind == "combined" and (not g.size or (not b.size and not self.adaptive)):
            raise ScheduleError("a combined schedule needs gammas and betas (or adaptive)")

    @property
    def uses_likelihood(self) -> bool:
        return self.kind != "smoothed-indicator"

    @property
    def n_layers(self) -> int:
        return len(self.betas) + len(self.gammas)

    def layer_params(self, k: int) -> tuple[float, float | None]:
        """``(beta, gamma)`` of 1-based layer ``k``; ``gamma=None`` means no indicator."""
        if not 1 <= k <= self.n_layers:
            raise IndexError(f"layer {k} outside 1..{self.n_layers}")
        nb = len(self.betas)
        if k <= nb:
            return self.betas[k - 1], None
        return (1.0 if self.kind == "combined" else 0.0), self.gammas[k - nb - 1]

    @classmethod
    def geometric_gammas(cls, gamma_star: float = 50.0, n_layers: int = 12) -> tuple[float, ...]:
        return tuple(gamma_star / 2.0 ** (n_layers - k) for k in range(1, n_layers + 1))

    @classmethod
    def geometric_betas(cls, n_layers: int, beta_min: float = 1e-3) -> tuple[float, ...]:
        if n_layers == 1:
            return (1.0,)
        return tuple(beta_min ** ((n_layers - k) / (n_layers - 1)) for k in range(1, n_layers + 1))

    @classmethod
    def prior_failure(cls, gamma_star: float = 50.0, n_layers: int = 12) -> "BridgingSchedule":
        return cls("smoothed-indicator", gammas=cls.geometric_gammas(gamma_star, n_layers))

    def with_betas(self, betas) -> "BridgingSchedule":
        return BridgingSchedule(self.kind, tuple(betas), self.gammas, False, self.ess_target,
                                self.max_tempering_layers)


def _log_bridge(problem: ReliabilityProblem, beta: float, gamma: float | None,
                log_prior: np.ndarray, f: np.ndarray, ll: np.ndarray | None) -> np.ndarray:
    out = np.array(log_prior, dtype=float, copy=True)
    if beta:
        out = out + beta * ll
    if gamma is not None:
        out = out + SmoothedIndicator(gamma, problem.threshold).log_value(f)
    return np.where(np.isnan(out), -np.inf, out)


def bridging_logdensity(problem: ReliabilityProblem, schedule: BridgingSchedule, k: int,
                        theta) -> np.ndarray:
    """Unnormalised log of the ``k``-th bridging density (1-based)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    beta, gamma = schedule.layer_params(k)
    f, ll = problem.evaluate(theta, need_likelihood=bool(beta))
    return _log_bridge(problem, beta, gamma, problem.log_prior(theta), f, ll)


@dataclass(frozen=True)
class LayerDiagnostics:
    index: int
    beta: float
    gamma: float | None
    n_cross_evals: int
    n_model_evals: int
    ranks: tuple[int, ...]
    tau: float
    converged: bool
    cross_errors: tuple[float, ...] = ()
    ess_fraction: float = math.nan


@dataclass(frozen=True, eq=False)
class DeepTransport:
    """Composition of squared-FTT layers pushing a reference forward.

    With no layers the transport is the identity and its density is the
    reference density.
    """

    dim: int
    layers: tuple[SquaredFTTDensity, ...] = ()
    reference: Reference = Reference("gaussian")
    diagnostics: tuple[LayerDiagnostics, ...] = ()
    extra_model_evals: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for q in self.layers:
            if q.ndim != self.dim:
                raise ValueError("layer dimension does not match the transport")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_model_evals(self) -> int:
        return sum(d.n_model_evals for d in self.diagnostics) + self.extra_model_evals

    def truncated(self, k: int) -> "DeepTransport":
        """The first ``k`` layers."""
        return DeepTransport(self.dim, self.layers[:k], self.reference, self.diagnostics[:k])

    def push(self, r) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Map reference samples through ``T``.

        Returns
        -------
        theta : ndarray, shape (N, d)
        log_density : ndarray, shape (N,)
            ``log`` of the pushforward density at ``theta``.
        ok : ndarray of bool
            ``False`` where an inverse CDF failed; such rows hold ``nan``.
        """
        v = np.atleast_2d(np.asarray(r, dtype=float))
        if v.shape[1] != self.dim:
            raise ValueError(f"expected samples with {self.dim} coordinates")
        ref = self.reference
        logp = ref.log_pdf(v)
        ok = np.isfinite(logp)
        tiny = np.finfo(float).tiny
        for q in reversed(self.layers):
            z = np.maximum(ref.cdf(v), tiny)
            zc = np.maximum(ref.sf(v), tiny)
            logp = logp - ref.log_pdf(v)
            v = np.where(ok[:, None], v, 0.0)
            v_new, lq, ok_k = q.inverse_flagged(np.where(ok[:, None], z, 0.5),
                                                np.where(ok[:, None], zc, 0.5))
            ok &= ok_k
            logp = logp + lq
            v = v_new
        v[~ok] = np.nan
        logp[~ok] = np.nan
        return v, logp, ok

    def sample(self, n: int, seed: int = 0):
        """Draw ``n`` samples; ``(theta, log_density, ok)``."""
        rng = np.random.default_rng(seed)
        return self.push(self.reference.sample(rng, n, self.dim))

    def pull(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Inverse map ``T^{-1}`` and the pushforward log density at ``theta``."""
        v = np.atleast_2d(np.asarray(theta, dtype=float))
        ref = self.reference
        logp = np.zeros(v.shape[0])
        eps = np.finfo(float).eps
        for q in self.layers:
            z, lq = q.forward_with_log_density(v)
            logp += lq
            v = ref.invcdf(np.clip(z, np.finfo(float).tiny, 1.0 - eps))
            logp -= ref.log_pdf(v)
        return v, logp + ref.log_pdf(v)

    def log_density(self, theta) -> np.ndarray:
        return self.pull(theta)[1]


def _reference_bases(reference: Reference, dim: int, n_nodes: int, half_width: float,
                     kind: str) -> list[Basis1D]:
    if reference.kind == "gaussian":
        return [Basis1D.gaussian(n_nodes, half_width, kind) for _ in range(dim)]
    return [Basis1D.uniform(0.0, 1.0, n_nodes, kind) for _ in range(dim)]


def _adapt_beta(problem, transport, beta_prev, ess_target, n_ess, rng, last):
    """Largest beta in (beta_prev, 1] whose incremental weights keep the ESS target."""
    theta, _, ok = transport.push(transport.reference.sample(rng, n_ess, transport.dim))
    _, ll = problem.evaluate(theta[ok])
    ll = ll[np.isfinite(ll)]
    if last or log_ess_fraction((1.0 - beta_prev) * ll) >= ess_target:
        return 1.0, n_ess
    lo, hi = beta_prev, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if log_ess_fraction((mid - beta_prev) * ll) >= ess_target:
            lo = mid
        else:
            hi = mid
    # keep strict monotonicity even when the very first increment is too large
    return max(lo, beta_prev + 1e-12 * max(1.0, beta_prev)), n_ess


def build(
    problem: ReliabilityProblem,
    schedule: BridgingSchedule,
    cross_config: CrossConfig = CrossConfig(),
    seed: int = 0,
    *,
    n_nodes: int = 30,
    half_width: float = 4.0,
    basis_kind: str = "lagrange1",
    ratio: str = "bridging",
    reference: Reference = Reference("gaussian"),
    base: DeepTransport | None = None,
    n_ess: int = 1000,
    require_convergence: bool = False,
) -> DeepTransport:
    """Build a deep transport layer by layer.

    Parameters
    ----------
    problem : ReliabilityProblem
    schedule : BridgingSchedule
    cross_config : CrossConfig
        Cross settings for every layer; layer ``k`` uses seed ``seed + k``.
    ratio : {"bridging", "exact"}
        Layer target. ``"bridging"`` uses ``phi_k / phi_{k-1}`` pulled back
        through the previous layers; ``"exact"`` uses ``phi_k`` divided by the
        actual pushforward density of the previous layers, which also corrects
        their approximation error.
    base : DeepTransport, optional
        Reuse its layers as the first layers (for a ``combined`` schedule this
        is the posterior map; its layer count replaces the ``betas`` ladder).
    n_ess : int
        Samples for adaptive tempering and the per-layer ESS diagnostic
        (0 disables the diagnostic).
    require_convergence : bool
        Raise :class:`LayerBuildError` when a layer's cross does not converge.
    """
    if ratio not in ("bridging", "exact"):
        raise ValueError("ratio must be 'bridging' or 'exact'")
    if schedule.uses_likelihood and not problem.has_likelihood:
        raise ScheduleError("tempering requires a likelihood")
    if not schedule.uses_likelihood and problem.has_likelihood and schedule.kind != "smoothed-indicator":
        raise ScheduleError("schedule does not match the problem")
    d = problem.dim
    bases = _reference_bases(reference, d, n_nodes, half_width, basis_kind)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])

    layers: list[SquaredFTTDensity] = []
    diags: list[LayerDiagnostics] = []
    params: list[tuple[float, float | None]] = []
    if base is not None:
        if base.dim != d:
            raise ValueError("base transport has the wrong dimension")
        layers = list(base.layers)
        diags = list(base.diagnostics)
        params = [(dg.beta, dg.gamma) for dg in diags]
        if len(params) != len(layers):
            params = [(1.0, None)] * len(layers)

    # the ladder still to build
    plan: list[tuple[float, float | None] | None] = []
    if base is None or schedule.kind != "combined":
        if schedule.adaptive:
            plan += [None] * schedule.max_tempering_layers
        else:
            plan += [(b, None) for b in schedule.betas]
    beta_final = 1.0 if schedule.kind == "combined" else 0.0
    plan += [(beta_final, g) for g in schedule.gammas]
    if schedule.kind == "tempering" and base is not None:
        plan = [p for p in plan if p is None or p[0] > params[-1][0]]

    beta_prev = params[-1][0] if params else 0.0
    prev_param = params[-1] if params else None
    i = 0
    while i < len(plan):
        k = len(layers) + 1
        current = DeepTransport(d, tuple(layers), reference)
        extra_evals = 0
        p = plan[i]
        if p is None:
            if beta_prev >= 1.0:
                plan = plan[:i] + [q for q in plan[i:] if q is not None]
                continue
            last_adaptive = i + 1 >= len(plan) or plan[i + 1] is not None
            beta, extra_evals = _adapt_beta(problem, current, beta_prev, schedule.ess_target,
                                            n_ess, rng, last_adaptive)
            p = (beta, None)
        beta, gamma = p
        counter = {"model": 0}

        def log_target(u, beta=beta, gamma=gamma, prev=prev_param, current=current,
                       counter=counter):
            theta, logp, ok = current.push(u)
            lt = np.full(u.shape[0], -np.inf)
            if not np.any(ok):
                return lt
            th = theta[ok]
            need_ll = bool(beta) or (prev is not None and bool(prev[0]))
            f, ll = problem.evaluate(th, need_likelihood=need_ll)
            counter["model"] += th.shape[0]
            lpr = problem.log_prior(th)
            num = _log_bridge(problem, beta, gamma, lpr, f, ll)
            if ratio == "exact" or prev is None:
                den = logp[ok] if current.n_layers else reference.log_pdf(th)
            else:
                den = _log_bridge(problem, prev[0], prev[1], lpr, f, ll)
            val = np.where(np.isfinite(num), num - np.where(np.isfinite(den), den, 0.0), -np.inf)
            lt[ok] = val + reference.log_pdf(u[ok])
            return lt

        cfg = CrossConfig(**{**cross_config.__dict__, "seed": cross_config.seed + k})
        q = build_sqrt_approx(log_target, bases, cfg)
        info = q.tt.info
        layers.append(q)
        ess_frac = math.nan
        new = DeepTransport(d, tuple(layers), reference)
        if n_ess:
            th, lq, ok = new.sample(n_ess, seed=int(rng.integers(2**63)))
            f, ll = problem.evaluate(th[ok], need_likelihood=bool(beta))
            lw = _log_bridge(problem, beta, gamma, problem.log_prior(th[ok]), f, ll) - lq[ok]
            ess_frac = log_ess_fraction(lw)
            extra_evals += int(ok.sum())
        dg = LayerDiagnostics(k, beta, gamma, info.n_evals, counter["model"] + extra_evals,
                              q.tt.ranks, q.tau, info.converged, info.errors, ess_frac)
        logger.info("layer %d beta=%.4g gamma=%s ranks=%s evals=%d ess=%.3f", k, beta, gamma,
                    q.tt.ranks, info.n_evals, ess_frac)
        diags.append(dg)
        if require_convergence and not info.converged:
            raise LayerBuildError(k, "cross did not converge", dg)
        params.append((beta, gamma))
        prev_param = (beta, gamma)
        beta_prev = beta
        i += 1
        if plan[i - 1] is None and beta >= 1.0:
            # tempering finished early; drop the unused adaptive slots
            plan = plan[:i] + [q for q in plan[i:] if q is not None]
    return DeepTransport(d, tuple(layers), reference, tuple(diags))


def layer_log_ratios(problem: ReliabilityProblem, transport: DeepTransport, n_probe: int = 1000,
                     seed: int = 0) -> np.ndarray:
    """Largest absolute log ratio between consecutive bridging densities.

    Entry ``k - 2`` is ``max |log phi_k - log phi_{k-1}|`` over ``n_probe``
    reference points pushed through the first ``k - 1`` layers. A schedule
    whose entries stay within about 20 is fine enough for the layer fits.
    """
    params = [(dg.beta, dg.gamma) for dg in transport.diagnostics]
    if len(params) != transport.n_layers:
        raise ValueError("transport carries no schedule diagnostics")
    r = transport.reference.sample(np.random.default_rng(seed), n_probe, transport.dim)
    out = []
    for k in range(2, transport.n_layers + 1):
        th, _, ok = transport.truncated(k - 1).push(r)
        th = th[ok]
        (b0, g0), (b1, g1) = params[k - 2], params[k - 1]
        f, ll = problem.evaluate(th, need_likelihood=bool(b0 or b1))
        lpr = problem.log_prior(th)
        diff = _log_bridge(problem, b1, g1, lpr, f, ll) - _log_bridge(problem, b0, g0, lpr, f, ll)
        out.append(np.max(np.abs(diff[np.isfinite(diff)]), initial=0.0))
    return np.asarray(out)


def push_samples(transport: DeepTransport, reference_samples):
    return transport.push(reference_samples)
