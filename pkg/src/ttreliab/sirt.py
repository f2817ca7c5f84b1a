"""Squared functional tensor-train densities and their Rosenblatt transport.

A density on a product domain is written as

    pi_hat(theta) = (g(theta)**2 + tau) * lambda(theta) / z

where ``g`` is a functional tensor train (nodal values in a 1D interpolation
basis per coordinate), ``lambda`` a product weight and ``tau > 0`` a defensive
constant. Every coordinate is first sent to the unit interval by a monotone
map ``x = m(theta)`` with ``m' = lambda`` (an affine map for a uniform weight,
the standard normal CDF for a Gaussian weight), so internally the density is
``(g**2 + tau) / z`` on ``[0, 1]^d`` and all marginals follow from the
interpolation mass matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr, ndtri

from .tt import CrossConfig, TensorTrain, cross_build

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_CHUNK = 4096


class DomainError(ValueError):
    pass


class DegenerateTargetError(ValueError):
    pass


class RootFindingError(RuntimeError):
    def __init__(self, dim: int, message: str = ""):
        self.dim = dim
        super().__init__(f"inverse CDF did not converge in dimension {dim}. {message}")


# --------------------------------------------------------------------------
# one-dimensional bases
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Basis1D:
    """Nodal interpolation basis on one coordinate.

    Use :meth:`gaussian` for a coordinate on the whole real line carrying a
    standard normal weight, and :meth:`uniform` for a bounded interval.

    Attributes
    ----------
    nodes : ndarray
        Nodes in the unit coordinate ``x``; ``nodes[0] = 0``, ``nodes[-1] = 1``.
    kind : {"lagrange1", "chebyshev"}
        Piecewise-linear hats, or a global Lagrange polynomial on
        Chebyshev-Lobatto nodes.
    domain : tuple of float or None
        ``(a, b)`` for a uniform weight, ``None`` for the Gaussian line.
    """

    nodes: np.ndarray
    kind: str = "lagrange1"
    domain: tuple[float, float] | None = None
    nodes_c: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a basis needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if nodes[0] != 0.0 or nodes[-1] != 1.0:
            raise ValueError("unit-coordinate nodes must span [0, 1]")
        if self.kind not in ("lagrange1", "chebyshev"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.domain is not None and not self.domain[0] < self.domain[1]:
            raise ValueError("empty domain")
        nodes_c = 1.0 - nodes if self.nodes_c is None else np.asarray(self.nodes_c, float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "nodes_c", nodes_c)
        if self.kind == "chebyshev":
            n = nodes.size
            w = np.ones(n)
            w[0] = w[-1] = 0.5
            w[1::2] *= -1.0
            object.__setattr__(self, "_bary", w)
            gx, gw = leggauss(n + 1)
            object.__setattr__(self, "_gauss", (0.5 * (gx + 1.0), 0.5 * gw))

    # construction ---------------------------------------------------------
    @classmethod
    def gaussian(cls, n: int = 30, half_width: float = 4.0, kind: str = "lagrange1") -> "Basis1D":
        """Basis on the real line with standard normal weight.

        For ``lagrange1`` the interior nodes are equispaced in ``theta`` on
        ``[-half_width, half_width]``; the two end cells reach to infinity.
        """
        if n < 4 and kind == "lagrange1":
            raise ValueError("a Gaussian piecewise-linear basis needs n >= 4")
        if kind == "lagrange1":
            u = np.linspace(-half_width, half_width, n - 2)
            x = np.concatenate([[0.0], ndtr(u), [1.0]])
            xc = np.concatenate([[1.0], ndtr(-u), [0.0]])
        else:
            x = _lobatto(n)
            xc = x[::-1].copy()
        return cls(x, kind, None, xc)

    @classmethod
    def uniform(cls, a: float, b: float, n: int = 30, kind: str = "lagrange1") -> "Basis1D":
        x = np.linspace(0.0, 1.0, n) if kind == "lagrange1" else _lobatto(n)
        return cls(x, kind, (float(a), float(b)))

    # domain map -----------------------------------------------------------
    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def is_gaussian(self) -> bool:
        return self.domain is None

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    def to_unit(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit coordinate ``x`` and its complement ``1 - x``."""
        theta = np.asarray(theta, dtype=float)
        if self.is_gaussian:
            return ndtr(theta), ndtr(-theta)
        a, b = self.domain
        if np.any(theta < a) or np.any(theta > b):
            raise DomainError(f"point outside the domain [{a}, {b}]")
        x = (theta - a) / (b - a)
        return x, (b - theta) / (b - a)

    def from_unit(self, x: np.ndarray, xc: np.ndarray) -> np.ndarray:
        if self.is_gaussian:
            lo = x <= 0.5
            out = np.empty_like(x)
            out[lo] = ndtri(x[lo])
            out[~lo] = -ndtri(xc[~lo])
            return out
        a, b = self.domain
        return np.where(x <= 0.5, a + x * (b - a), b - xc * (b - a))

    def log_weight(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.is_gaussian:
            return -0.5 * theta**2 - _LOG_SQRT_2PI
        a, b = self.domain
        return np.full(theta.shape, -np.log(b - a))

    @property
    def points(self) -> np.ndarray:
        """Where the target is sampled for each node.

        Gaussian end nodes sit at infinity; they are sampled one interior
        spacing beyond the outermost interior node.
        """
        theta = self.from_unit(self.nodes.copy(), self.nodes_c.copy())
        if self.is_gaussian:
            theta[0] = theta[1] - (theta[2] - theta[1])
            theta[-1] = theta[-2] + (theta[-2] - theta[-3])
        return theta

    # interpolation --------------------------------------------------------
    def locate(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell index and local coordinate ``s`` in ``[0, 1]``.

        The local coordinate is measured from the left node, so in the
        upper Gaussian end cell (``theta`` beyond about 7) it carries only
        a few significant digits of ``1 - x``.
        """
        x, xc = self.to_unit(theta)
        if self.kind == "chebyshev":
            return np.zeros(x.shape, dtype=int), x
        n = self.size
        j_lo = np.searchsorted(self.nodes, x, side="right") - 1
        j_hi = n - 2 - (np.searchsorted(self.nodes_c[::-1], xc, side="right") - 1)
        j = np.clip(np.where(x <= 0.5, j_lo, j_hi), 0, n - 2)
        h = self.widths[j]
        s = np.where(x <= 0.5, (x - self.nodes[j]) / h, (self.nodes_c[j] - xc) / h)
        return j, np.clip(s, 0.0, 1.0)

    def from_cell(self, j: np.ndarray, s: np.ndarray) -> np.ndarray:
        if self.kind == "chebyshev":
            return self.from_unit(s, 1.0 - s)
        h = self.widths[j]
        x = self.nodes[j] + s * h
        xc = self.nodes_c[j + 1] + (1.0 - s) * h
        return self.from_unit(x, xc)

    def weights(self, j: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Dense interpolation weights ``(N, n)`` at the points ``(j, s)``."""
        n = self.size
        if self.kind == "lagrange1":
            w = np.zeros((j.size, n))
            rows = np.arange(j.size)
            w[rows, j] = 1.0 - s
            w[rows, j + 1] += s
            return w
        return self._bary_weights(s)

    def _bary_weights(self, x: np.ndarray) -> np.ndarray:
        diff = x[:, None] - self.nodes[None, :]
        exact = diff == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self._bary / diff
            w = t / t.sum(axis=1, keepdims=True)
        hit = exact.any(axis=1)
        w[hit] = exact[hit].astype(float)
        return w

    def mass_matrix(self) -> np.ndarray:
        """Gram matrix of the basis in ``L2([0, 1])``."""
        n = self.size
        if self.kind == "lagrange1":
            h = self.widths
            m = np.zeros((n, n))
            m[np.arange(n - 1), np.arange(n - 1)] += h / 3.0
            m[np.arange(1, n), np.arange(1, n)] += h / 3.0
            m[np.arange(n - 1), np.arange(1, n)] = h / 6.0
            m[np.arange(1, n), np.arange(n - 1)] = h / 6.0
            return m
        gx, gw = self._gauss
        w = self._bary_weights(gx)
        return (w * gw[:, None]).T @ w

    # cumulative mass in the unit coordinate ------------------------------
    def cell_masses(self, b: np.ndarray) -> np.ndarray:
        """``int |v(x)|^2 dx`` over each cell, where ``v = sum_j b_j h_j``."""
        if self.kind == "lagrange1":
            a = np.einsum("njr,njr->nj", b, b)
            c = np.einsum("njr,njr->nj", b[:, :-1], b[:, 1:])
            return self.widths * (a[:, :-1] + c + a[:, 1:]) / 3.0
        mb = np.einsum("ij,njr->nir", self.mass_matrix(), b)
        return np.einsum("njr,njr->n", mb, b)[:, None]

    def partial_mass(self, b: np.ndarray, j: np.ndarray, s: np.ndarray) -> np.ndarray:
        """``int`` of ``|v|^2`` from the left edge of cell ``j`` to local ``s``."""
        rows = np.arange(j.size)
        if self.kind == "lagrange1":
            bj, bk = b[rows, j], b[rows, j + 1]
            a = np.einsum("nr,nr->n", bj, bj)
            c = np.einsum("nr,nr->n", bj, bk)
            e = np.einsum("nr,nr->n", bk, bk)
            t = 1.0 - s
            val = a * (1.0 - t**3) / 3.0 + c * (s**2 - 2.0 * s**3 / 3.0) + e * s**3 / 3.0
            return self.widths[j] * val
        gx, gw = self._gauss
        pts = (s[:, None] * gx[None, :]).ravel()
        w = self._bary_weights(pts).reshape(s.size, gx.size, -1)
        v = np.einsum("nqj,njr->nqr", w, b)
        return s * np.einsum("q,nqr,nqr->n", gw, v, v)

    def density_in_cell(self, b: np.ndarray, j: np.ndarray, s: np.ndarray) -> np.ndarray:
        """``|v|^2`` at ``(j, s)`` per unit of ``x``."""
        v = np.einsum("nj,njr->nr", self.weights(j, s), b)
        return np.einsum("nr,nr->n", v, v)


def _lobatto(n: int) -> np.ndarray:
    x = 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1)))
    x[0], x[-1] = 0.0, 1.0
    return x


# --------------------------------------------------------------------------
# reference densities
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Reference:
    """Product-form reference: standard Gaussian or uniform on ``[0, 1]``."""

    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown reference {self.kind!r}")

    def cdf(self, u):
        u = np.asarray(u, dtype=float)
        return ndtr(u) if self.kind == "gaussian" else np.clip(u, 0.0, 1.0)

    def sf(self, u):
        u = np.asarray(u, dtype=float)
        return ndtr(-u) if self.kind == "gaussian" else np.clip(1.0 - u, 0.0, 1.0)

    def invcdf(self, z, zc=None):
        z = np.asarray(z, dtype=float)
        if self.kind == "uniform":
            return z.copy()
        if zc is None:
            return ndtri(z)
        return np.where(z <= 0.5, ndtri(np.minimum(z, 0.5)), -ndtri(np.minimum(zc, 0.5)))

    def log_pdf(self, u):
        """Log density summed over the last axis."""
        u = np.asarray(u, dtype=float)
        if self.kind == "gaussian":
            return np.sum(-0.5 * u**2 - _LOG_SQRT_2PI, axis=-1)
        inside = np.all((u >= 0.0) & (u <= 1.0), axis=-1)
        return np.where(inside, 0.0, -np.inf)

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal((n, d))
        return rng.random((n, d))


def reference_cdf(reference: Reference, value):
    return reference.cdf(value)


def reference_invcdf(reference: Reference, value):
    return reference.invcdf(value)


# --------------------------------------------------------------------------
# the density
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SquaredFTTDensity:
    """Normalised squared FTT density with closed-form conditionals.

    On construction the cores are right-orthogonalised in the ``L2`` inner
    product of each basis and rescaled so that ``int g**2 = 1``; hence every
    right marginal accumulator is the identity and ``z = 1 + tau``.

    Parameters
    ----------
    tt : TensorTrain
        Nodal values of ``g``.
    bases : sequence of Basis1D
    tau : float
        Defensive constant, relative to ``int g**2``.
    """

    tt: TensorTrain
    bases: tuple[Basis1D, ...]
    tau: float
    scale: float = field(default=None)

    def __post_init__(self):
        bases = tuple(self.bases)
        if len(bases) != self.tt.ndim:
            raise ValueError("one basis per tensor dimension is required")
        for k, (basis, n) in enumerate(zip(bases, self.tt.mode_sizes)):
            if basis.size != n:
                raise ValueError(f"basis {k} has {basis.size} nodes, core has {n}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        cores, norm2 = _orthogonalise(self.tt.cores, bases)
        if not norm2 > 0:
            raise DegenerateTargetError("the square-root approximation vanishes identically")
        scale = np.sqrt(norm2) if self.scale is None else self.scale
        cores[0] = cores[0] / scale
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "scale", float(scale))
        object.__setattr__(self, "_cores", tuple(cores))
        object.__setattr__(self, "tt", TensorTrain(tuple(cores), info=self.tt.info))

    @classmethod
    def from_normalized_cores(cls, cores, bases, tau: float, scale: float) -> "SquaredFTTDensity":
        """Rebuild from cores that are already orthogonalised and scaled (no arithmetic)."""
        obj = object.__new__(cls)
        cores = tuple(np.asarray(c, dtype=float) for c in cores)
        object.__setattr__(obj, "bases", tuple(bases))
        object.__setattr__(obj, "tau", float(tau))
        object.__setattr__(obj, "scale", float(scale))
        object.__setattr__(obj, "_cores", cores)
        object.__setattr__(obj, "tt", TensorTrain(cores))
        return obj

    @property
    def ndim(self) -> int:
        return len(self.bases)

    @property
    def norm_const(self) -> float:
        return float(np.einsum("aib,ij,ajb->", self._cores[0], self.bases[0].mass_matrix(),
                               self._cores[0])) + self.tau

    @property
    def marginal_accumulators(self) -> list[np.ndarray]:
        """Right Gram matrices ``P_k`` for ``k = 0..d``."""
        acc = [np.ones((1, 1))]
        for core, basis in zip(self._cores[::-1], self.bases[::-1]):
            m = basis.mass_matrix()
            acc.append(np.einsum("aib,ij,bc,djc->ad", core, m, acc[-1], core))
        return acc[::-1]

    # -- core routines over chunks ----------------------------------------
    def _sweep(self, theta=None, z=None, zc=None, upto=None, strict=True):
        """Shared forward/inverse recursion.

        Exactly one of ``theta`` (forward) or ``z`` (inverse) is given.
        Returns ``(theta, z, log_density_unit, ok)`` where the log density is
        in the unit coordinate and only covers dimensions ``< upto``; ``ok``
        flags points whose inverse root-finding converged.
        """
        forward = theta is not None
        arr = theta if forward else z
        n_pts, d = arr.shape
        upto = d if upto is None else upto
        out_theta = np.array(theta, dtype=float, copy=True) if forward else np.empty_like(z)
        out_z = np.empty((n_pts, upto))
        logd = np.zeros(n_pts)
        ok = np.ones(n_pts, dtype=bool)
        left = np.ones((n_pts, 1))
        for k in range(upto):
            basis = self.bases[k]
            core = self._cores[k]
            r, n, s_ = core.shape
            b = (left @ core.reshape(r, n * s_)).reshape(n_pts, n, s_)
            masses = basis.cell_masses(b) + self.tau * (basis.widths if basis.kind == "lagrange1"
                                                         else np.ones(1))
            total = masses.sum(axis=1)
            if forward:
                j, s = basis.locate(arr[:, k])
                cell = _CellModel(basis, b, j)
            else:
                j, need = _locate_mass(masses, total, z[:, k], None if zc is None else zc[:, k])
                cell = _CellModel(basis, b, j)
                s, ok_k = _solve_cell(cell, need, masses[np.arange(n_pts), j], self.tau)
                if not np.all(ok_k):
                    if strict:
                        raise RootFindingError(k, f"{np.count_nonzero(~ok_k)} points unresolved")
                    ok &= ok_k
                out_theta[:, k] = basis.from_cell(j, s)
            if forward:
                cum = np.cumsum(masses, axis=1) - masses
                acc = cum[np.arange(n_pts), j] + cell.mass(s) + self.tau * cell.width * s
                out_z[:, k] = np.clip(acc / total, 0.0, 1.0)
            else:
                out_z[:, k] = z[:, k]
            logd += np.log(cell.dens(s) + self.tau) - np.log(total)
            left = cell.vector(s)
        return out_theta, out_z, logd, ok

    def _chunked(self, fn, *arrays):
        n = arrays[0].shape[0]
        if n <= _CHUNK:
            return fn(*arrays)
        parts = [fn(*(a[i:i + _CHUNK] if a is not None else None for a in arrays))
                 for i in range(0, n, _CHUNK)]
        return tuple(np.concatenate(p) for p in zip(*parts))

    def _check(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.ndim:
            raise ValueError(f"expected points with {self.ndim} coordinates")
        return theta

    def _log_weight(self, theta):
        return sum(b.log_weight(theta[:, k]) for k, b in enumerate(self.bases))

    # -- public API -------------------------------------------------------
    def log_density(self, theta) -> np.ndarray:
        theta = self._check(theta)
        for k, b in enumerate(self.bases):
            b.to_unit(theta[:, k])  # domain check
        _, _, logd, _ = self._chunked(lambda t: self._sweep(theta=t), theta)
        return logd + self._log_weight(theta)

    def density(self, theta) -> np.ndarray:
        return np.exp(self.log_density(theta))

    def sqrt_eval(self, theta) -> np.ndarray:
        """The normalised square-root approximation ``g(theta)``."""
        theta = self._check(theta)
        left = np.ones((theta.shape[0], 1))
        for k, b in enumerate(self.bases):
            j, s = b.locate(theta[:, k])
            left = np.einsum("nj,na,ajb->nb", b.weights(j, s), left, self._cores[k])
        return left[:, 0]

    def conditional_cdf(self, k: int, theta_prefix, theta_k) -> np.ndarray:
        """``F_{k|<k}`` for 0-based dimension ``k``."""
        theta_prefix = np.atleast_2d(np.asarray(theta_prefix, dtype=float))
        theta_k = np.atleast_1d(np.asarray(theta_k, dtype=float))
        if theta_prefix.shape[1] != k:
            theta_prefix = theta_prefix.reshape(theta_k.size, k)
        pts = np.column_stack([theta_prefix, theta_k, np.zeros((theta_k.size, self.ndim - k - 1))])
        _, z, _, _ = self._sweep(theta=pts, upto=k + 1)
        return z[:, k]

    def rosenblatt_forward(self, theta) -> np.ndarray:
        theta = self._check(theta)
        _, z, _, _ = self._chunked(lambda t: self._sweep(theta=t), theta)
        return z

    def forward_with_log_density(self, theta):
        """Uniform coordinates and ``log pi_hat`` in one pass."""
        theta = self._check(theta)
        _, z, logd, _ = self._chunked(lambda t: self._sweep(theta=t), theta)
        return z, logd + self._log_weight(theta)

    def rosenblatt_inverse(self, z, zc=None) -> np.ndarray:
        theta, _ = self.inverse_with_log_density(z, zc)
        return theta

    def inverse_with_log_density(self, z, zc=None):
        """Invert the Rosenblatt map; ``zc = 1 - z`` may be passed for accuracy near 1."""
        z = self._check(z)
        if zc is None:
            if np.any(z <= 0.0) or np.any(z >= 1.0):
                raise DomainError("uniform coordinates must lie strictly inside (0, 1)")
        else:
            zc = self._check(zc)
            if np.any(z <= 0.0) or np.any(zc <= 0.0):
                raise DomainError("uniform coordinates must lie strictly inside (0, 1)")
        theta, _, logd, _ = self._chunked(lambda a, c: self._sweep(z=a, zc=c), z, zc)
        return theta, logd + self._log_weight(theta)

    def inverse_flagged(self, z, zc):
        """Like :meth:`inverse_with_log_density` but flags, rather than raises on,
        points where root-finding failed. Failed points carry ``nan``."""
        theta, _, logd, ok = self._chunked(
            lambda a, c: self._sweep(z=a, zc=c, strict=False), z, zc)
        logd = logd + self._log_weight(theta)
        theta[~ok] = np.nan
        logd[~ok] = np.nan
        return theta, logd, ok


def _orthogonalise(cores, bases):
    """Right-orthogonalise cores in the mass-matrix inner product."""
    cores = [np.array(c, dtype=float) for c in cores]
    d = len(cores)
    for k in range(d - 1, 0, -1):
        m = bases[k].mass_matrix()
        chol = np.linalg.cholesky(m)
        r, n, s = cores[k].shape
        h = np.einsum("aib,ij->ajb", cores[k], chol).reshape(r, n * s)
        q, rr = np.linalg.qr(h.T)
        new = q.T.reshape(-1, n, s)
        cores[k] = np.einsum("ajb,ji->aib", new, np.linalg.inv(chol))
        cores[k - 1] = np.einsum("anb,cb->anc", cores[k - 1], rr)
    m0 = bases[0].mass_matrix()
    norm2 = float(np.einsum("aib,ij,ajb->", cores[0], m0, cores[0]))
    return cores, norm2


class _CellModel:
    """``|v(x)|^2`` on the cell holding each point, ``v = sum_j b_j h_j``.

    For piecewise-linear bases the restriction is a quadratic in the local
    coordinate ``s``, so only three inner products per point are kept.
    """

    def __init__(self, basis: Basis1D, b: np.ndarray, j: np.ndarray):
        self.basis = basis
        self.linear = basis.kind == "lagrange1"
        rows = np.arange(j.size)
        if self.linear:
            self.width = basis.widths[j]
            self.bj, self.bk = b[rows, j], b[rows, j + 1]
            self.a = np.einsum("nr,nr->n", self.bj, self.bj)
            self.c = np.einsum("nr,nr->n", self.bj, self.bk)
            self.e = np.einsum("nr,nr->n", self.bk, self.bk)
        else:
            self.width = np.ones(j.size)
            self.b = b
            self.j = j

    def mass(self, s, idx=slice(None)):
        """Unnormalised mass from the cell's left edge to ``s``."""
        if self.linear:
            a, c, e = self.a[idx], self.c[idx], self.e[idx]
            # 1 - (1 - s)^3 written without cancellation
            val = a * s * (3.0 - 3.0 * s + s * s) / 3.0 + c * s * s * (1.0 - 2.0 * s / 3.0) \
                + e * s**3 / 3.0
            return self.width[idx] * val
        return self.basis.partial_mass(self.b[idx], self.j[idx], s)

    def dens(self, s, idx=slice(None)):
        """``|v|^2`` per unit of the unit coordinate."""
        if self.linear:
            t = 1.0 - s
            return self.a[idx] * t * t + 2.0 * self.c[idx] * s * t + self.e[idx] * s * s
        return self.basis.density_in_cell(self.b[idx], self.j[idx], s)

    def vector(self, s):
        if self.linear:
            return (1.0 - s)[:, None] * self.bj + s[:, None] * self.bk
        w = self.basis.weights(self.j, s)
        return np.einsum("nj,njr->nr", w, self.b)


def _locate_mass(masses, total, z, zc):
    """Cell ``j`` holding the quantile ``z`` and the mass still needed inside it."""
    n_pts, n_cells = masses.shape
    rows = np.arange(n_pts)
    target = z * total
    cum = np.cumsum(masses, axis=1)
    j = np.minimum(np.sum(cum < target[:, None], axis=1), n_cells - 1)
    need = target - (cum[rows, j] - masses[rows, j])
    if zc is not None:
        # above the median, measure the remaining mass from the right end
        up = np.flatnonzero(z > 0.5)
        if up.size:
            m_up = masses[up]
            target_r = zc[up] * total[up]
            rcum = np.cumsum(m_up[:, ::-1], axis=1)[:, ::-1]
            jr = np.clip(np.sum(rcum >= target_r[:, None], axis=1) - 1, 0, n_cells - 1)
            r_up = np.arange(up.size)
            j[up] = jr
            need[up] = m_up[r_up, jr] - (target_r - (rcum[r_up, jr] - m_up[r_up, jr]))
    return j, np.clip(need, 0.0, masses[rows, j])


def _solve_cell(cell: _CellModel, need, mass_j, tau, max_iter=100):
    """Newton iteration for ``s`` with a bisection safeguard."""
    n_pts = need.size
    width = cell.width
    lo = np.zeros(n_pts)
    hi = np.ones(n_pts)
    s = np.clip(need / np.where(mass_j > 0, mass_j, 1.0), 0.0, 1.0)
    done = np.zeros(n_pts, dtype=bool)
    scale = np.maximum(mass_j, np.finfo(float).tiny)
    for _ in range(max_iter):
        ia = np.flatnonzero(~done)
        if ia.size == 0:
            break
        sa = s[ia]
        phi = cell.mass(sa, ia) + tau * sa * width[ia] - need[ia]
        dphi = (cell.dens(sa, ia) + tau) * width[ia]
        pos = phi > 0
        hi[ia] = np.where(pos, sa, hi[ia])
        lo[ia] = np.where(pos, lo[ia], sa)
        cand = sa - phi / dphi
        bad = (cand <= lo[ia]) | (cand >= hi[ia]) | ~np.isfinite(cand)
        cand = np.where(bad, 0.5 * (lo[ia] + hi[ia]), cand)
        conv = (np.abs(phi) <= 1e-15 * scale[ia]) | (np.abs(cand - sa) <= 1e-15) | \
            (hi[ia] - lo[ia] <= 1e-15)
        s[ia] = np.where(conv, sa, cand)
        done[ia] = conv
    return s, done


def build_sqrt_approx(
    log_target: Callable[[np.ndarray], np.ndarray],
    bases,
    config: CrossConfig = CrossConfig(),
    tau: float | None = None,
) -> SquaredFTTDensity:
    """Fit ``g ~ sqrt(pi / lambda)`` by cross and wrap it as a density.

    Parameters
    ----------
    log_target : callable
        Unnormalised ``log pi`` at points of shape ``(N, d)``.
    bases : sequence of Basis1D
    config : CrossConfig
    tau : float, optional
        Defensive constant relative to ``int g**2``. Defaults to the
        mean-square cross residual, floored at ``1e-12``.
    """
    bases = tuple(bases)
    grids = [b.points for b in bases]
    logw_grid = [b.log_weight(g) for b, g in zip(bases, grids)]
    shift = {}

    def f(idx):
        pts = np.column_stack([g[idx[:, k]] for k, g in enumerate(grids)])
        lw = sum(lg[idx[:, k]] for k, lg in enumerate(logw_grid))
        logv = np.asarray(log_target(pts), dtype=float) - lw
        if "c" not in shift:
            finite = logv[np.isfinite(logv)]
            if finite.size == 0:
                raise DegenerateTargetError("target is -inf at every probed point")
            shift["c"] = float(finite.max())
        return np.exp(0.5 * (logv - shift["c"]))

    tt = cross_build(f, [b.size for b in bases], config)
    norm2 = _orthogonalise(tt.cores, bases)[1]
    if not norm2 > 0:
        raise DegenerateTargetError("the square-root approximation vanishes identically")
    if tau is None:
        tau = max(1e-12, tt.info.mean_square_residual / norm2)
    return SquaredFTTDensity(tt, bases, tau)


def density_eval(q: SquaredFTTDensity, theta) -> np.ndarray:
    return q.density(theta)


def conditional_cdf(q: SquaredFTTDensity, k: int, theta_prefix, theta_k) -> np.ndarray:
    return q.conditional_cdf(k, theta_prefix, theta_k)


def rosenblatt_forward(q: SquaredFTTDensity, theta) -> np.ndarray:
    return q.rosenblatt_forward(theta)


def rosenblatt_inverse(q: SquaredFTTDensity, z) -> np.ndarray:
    return q.rosenblatt_inverse(z)
