"""Karhunen-Loeve representation of log-normal random fields on mesh nodes.

The Gaussian part ``g(x) = sum_i sqrt(lambda_i) phi_i(x) xi_i`` comes from the
eigenpairs of the node covariance matrix weighted by lumped nodal masses. The
physical field is ``exp(mu_g + g)``, with ``(mu_g, sigma_g)`` chosen so that
the physical field has the requested mean and coefficient of variation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, TransformerMixin


@dataclass(frozen=True)
class LognormalMarginal:
    """Mean and coefficient of variation of a log-normal physical field."""

    mean: float
    cv: float

    def __post_init__(self):
        if not self.mean > 0 or not self.cv > 0:
            raise ValueError("mean and cv must be positive")

    @property
    def sigma_g(self) -> float:
        return math.sqrt(math.log1p(self.cv**2))

    @property
    def mu_g(self) -> float:
        return math.log(self.mean) - 0.5 * self.sigma_g**2


@dataclass(frozen=True)
class CovarianceKernel:
    """Stationary covariance of the underlying Gaussian field.

    Parameters
    ----------
    kind : {"exponential", "squared-exponential", "constant"}
    sigma : float
        Marginal standard deviation of the Gaussian field.
    ell : float
        Correlation length in mesh coordinate units.
    """

    kind: str = "exponential"
    sigma: float = 1.0
    ell: float = 0.05

    def __post_init__(self):
        if self.kind not in ("exponential", "squared-exponential", "constant"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.sigma > 0 or not self.ell > 0:
            raise ValueError("sigma and ell must be positive")

    def __call__(self, x, y=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        y = x if y is None else (np.asarray(y, dtype=float)[:, None] if np.ndim(y) == 1 else y)
        s2 = self.sigma**2
        if self.kind == "constant":
            return np.full((x.shape[0], y.shape[0]), s2)
        r = cdist(x, y)
        if self.kind == "exponential":
            return s2 * np.exp(-r / self.ell)
        return s2 * np.exp(-0.5 * (r / self.ell) ** 2)


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Truncated discrete KL expansion of one field.

    ``eigenvectors[:, i]`` has unit norm in the weighted inner product
    ``<u, v> = sum_j w_j u_j v_j``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    trace: float
    kernel: CovarianceKernel
    marginal: LognormalMarginal | None = None

    def __post_init__(self):
        for name in ("nodes", "weights", "eigenvalues", "eigenvectors"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_terms(self) -> int:
        return self.eigenvalues.size

    @property
    def node_count(self) -> int:
        return self.weights.size

    @property
    def energy_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.trace)

    def truncated_covariance(self) -> np.ndarray:
        s = self.eigenvectors * np.sqrt(self.eigenvalues)
        return s @ s.T

    def gaussian_part(self, xi) -> np.ndarray:
        """``g = sum_i sqrt(lambda_i) phi_i xi_i``; accepts ``(M,)`` or ``(N, M)``."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.n_terms:
            raise ValueError(f"expected {self.n_terms} coefficients, got {xi.shape[-1]}")
        return (xi * np.sqrt(self.eigenvalues)) @ self.eigenvectors.T

    def realize(self, xi) -> np.ndarray:
        """Physical field values at the nodes."""
        mu = self.marginal.mu_g if self.marginal is not None else 0.0
        return np.exp(mu + self.gaussian_part(xi))

    def project(self, values) -> np.ndarray:
        """KL coefficients of a physical field (weighted least squares)."""
        mu = self.marginal.mu_g if self.marginal is not None else 0.0
        g = np.log(np.asarray(values, dtype=float)) - mu
        return (g * self.weights) @ self.eigenvectors / np.sqrt(self.eigenvalues)


def lumped_weights(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Lumped nodal masses of a triangle mesh (one third of each element area)."""
    p = nodes[elements]
    area = 0.5 * np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    w = np.zeros(nodes.shape[0])
    np.add.at(w, elements.ravel(), np.repeat(area / 3.0, 3))
    return w


def kl_decompose(nodes, kernel: CovarianceKernel, n_terms: int, weights=None,
                 marginal: LognormalMarginal | None = None) -> KLBasis:
    """Leading eigenpairs of the mass-weighted node covariance.

    Solves ``K W phi = lambda phi`` through the symmetric form
    ``W^1/2 K W^1/2``. Eigenvectors get a deterministic sign: the first entry
    with magnitude above 1e-12 is positive.
    """
    nodes = np.asarray(nodes, dtype=float)
    nodes = nodes[:, None] if nodes.ndim == 1 else nodes
    n = nodes.shape[0]
    if not 1 <= n_terms <= n:
        raise ValueError(f"truncation must be in [1, {n}]")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per node")
    sw = np.sqrt(w)
    k = kernel(nodes)
    a = sw[:, None] * k * sw[None, :]
    trace = float(np.trace(a))
    lam, vec = np.linalg.eigh(a)
    lam, vec = lam[::-1][:n_terms], vec[:, ::-1][:, :n_terms]
    if lam[-1] <= 1e-14 * trace:
        warnings.warn("covariance is not positive definite; regularising", RuntimeWarning,
                      stacklevel=2)
        lam, vec = np.linalg.eigh(a + 1e-12 * trace * np.eye(n))
        lam, vec = lam[::-1][:n_terms], vec[:, ::-1][:, :n_terms]
    phi = vec / sw[:, None]
    for i in range(n_terms):
        j = np.flatnonzero(np.abs(phi[:, i]) > 1e-12)[0]
        if phi[j, i] < 0:
            phi[:, i] *= -1.0
    return KLBasis(nodes, w, lam, phi, trace, kernel, marginal)


def covariance_check(basis: KLBasis, n_samples: int, seed: int = 0, probe=None) -> float:
    """Largest deviation of the empirical Gaussian-part covariance from the truncated kernel."""
    if n_samples < 1000:
        raise ValueError("need at least 1000 samples")
    probe = np.arange(basis.node_count) if probe is None else np.asarray(probe)
    xi = np.random.default_rng(seed).standard_normal((n_samples, basis.n_terms))
    g = basis.gaussian_part(xi)[:, probe]
    emp = g.T @ g / n_samples
    return float(np.max(np.abs(emp - basis.truncated_covariance()[np.ix_(probe, probe)])))


class KLField(TransformerMixin, BaseEstimator):
    """Transformer from KL coefficients to physical nodal fields.

    ``fit(nodes)`` builds the basis, ``transform(xi)`` realizes fields and
    ``inverse_transform`` projects fields back to coefficients.
    """

    def __init__(self, n_terms: int = 4, kernel: str = "exponential", ell: float = 0.05,
                 mean: float = 1.0, cv: float = 0.05):
        self.n_terms = n_terms
        self.kernel = kernel
        self.ell = ell
        self.mean = mean
        self.cv = cv

    def fit(self, nodes, y=None, weights=None) -> "KLField":
        marginal = LognormalMarginal(self.mean, self.cv)
        kern = CovarianceKernel(self.kernel, marginal.sigma_g, self.ell)
        self.basis_ = kl_decompose(nodes, kern, self.n_terms, weights, marginal)
        return self

    def _check(self) -> KLBasis:
        if not hasattr(self, "basis_"):
            raise RuntimeError("KLField is not fitted")
        return self.basis_

    def transform(self, xi) -> np.ndarray:
        return self._check().realize(xi)

    def inverse_transform(self, values) -> np.ndarray:
        return self._check().project(values)
