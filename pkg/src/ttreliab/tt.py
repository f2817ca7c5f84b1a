"""Discrete tensor trains: cross approximation, evaluation and rounding.

A tensor train stores a ``d``-way array ``A[i_1, ..., i_d]`` as a chain of
three-way cores ``G_k`` of shape ``(r_{k-1}, n_k, r_k)`` with ``r_0 = r_d = 1``,
so that ``A[i] = G_1[:, i_1, :] @ ... @ G_d[:, i_d, :]``.

The cross builder is a one-site alternating cross (ALS-cross): each step
samples a fibre of the target through the current left/right interpolation
sets, picks new pivots with ``maxvol`` and grows ranks with a few random
enrichment fibres. One full sweep costs ``O(d n r^2)`` evaluations.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

BatchEvaluator = Callable[[np.ndarray], np.ndarray]


class NonFiniteValueError(ValueError):
    """Raised when the target returns a non-finite value during cross."""

    def __init__(self, index):
        self.index = tuple(int(i) for i in index)
        super().__init__(f"target returned a non-finite value at index {self.index}")


class CrossConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CrossConfig:
    """Settings for :func:`cross_build`.

    ``enrichment_rank`` random fibres are added at every step; they are the
    only mechanism by which ranks grow, so ``0`` freezes the ranks at
    ``init_rank``.
    """

    rel_tolerance: float = 1e-4
    max_rank: int = 10
    max_sweeps: int = 4
    enrichment_rank: int = 2
    seed: int = 0
    init_rank: int = 1

    def __post_init__(self):
        if not 0.0 < self.rel_tolerance < 1.0:
            raise ValueError("rel_tolerance must lie in (0, 1)")
        if self.max_rank < 1 or self.init_rank < 1:
            raise ValueError("ranks must be >= 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.enrichment_rank < 0:
            raise ValueError("enrichment_rank must be >= 0")


@dataclass(frozen=True)
class CrossInfo:
    n_evals: int
    n_sweeps: int
    converged: bool
    errors: tuple[float, ...]
    mean_square_residual: float


@dataclass(frozen=True, eq=False)
class TensorTrain:
    """Immutable tensor train.

    Parameters
    ----------
    cores : sequence of ndarray
        Core ``k`` has shape ``(r_{k-1}, n_k, r_k)``.
    info : CrossInfo, optional
        Build diagnostics when produced by :func:`cross_build`.
    """

    cores: tuple[np.ndarray, ...]
    info: CrossInfo | None = field(default=None, compare=False)

    def __post_init__(self):
        cores = tuple(np.array(c, dtype=float) for c in self.cores)
        if not cores:
            raise ValueError("a tensor train needs at least one core")
        for c in cores:
            if c.ndim != 3:
                raise ValueError("cores must be three-way arrays")
            if not np.all(np.isfinite(c)):
                raise ValueError("cores must be finite")
            c.setflags(write=False)
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for a, b in zip(cores[:-1], cores[1:]):
            if a.shape[2] != b.shape[0]:
                raise ValueError(f"core shapes {a.shape} and {b.shape} do not chain")
        object.__setattr__(self, "cores", cores)

    @property
    def ndim(self) -> int:
        return len(self.cores)

    @property
    def mode_sizes(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    def evaluate(self, index) -> float:
        """Value at a single multi-index."""
        index = np.asarray(index, dtype=int)
        return float(self.evaluate_batch(index[None, :])[0])

    def evaluate_batch(self, indices) -> np.ndarray:
        """Values at a batch of multi-indices, shape ``(N, d)``."""
        indices = np.atleast_2d(np.asarray(indices, dtype=int))
        if indices.shape[1] != self.ndim:
            raise ValueError(f"expected indices with {self.ndim} columns")
        sizes = np.asarray(self.mode_sizes)
        if np.any(indices < 0) or np.any(indices >= sizes):
            raise IndexError("multi-index out of range")
        return _contract(self.cores, indices)

    def full(self) -> np.ndarray:
        """Dense array. Only sensible for small tensors."""
        out = self.cores[0].reshape(self.cores[0].shape[1], -1)
        for c in self.cores[1:]:
            r, n, s = c.shape
            out = (out @ c.reshape(r, n * s)).reshape(-1, s)
        return out.reshape(self.mode_sizes)

    def norm(self) -> float:
        """Frobenius norm, computed core by core."""
        gram = np.ones((1, 1))
        for c in self.cores:
            gram = np.einsum("ab,aic,bid->cd", gram, c, c)
        return float(np.sqrt(max(gram[0, 0], 0.0)))

    def round(self, rel_tolerance: float) -> "TensorTrain":
        return round_tt(self, rel_tolerance)


def _contract(cores, indices: np.ndarray) -> np.ndarray:
    vec = cores[0][0, indices[:, 0], :]
    for k in range(1, len(cores)):
        vec = np.einsum("na,anb->nb", vec, cores[k][:, indices[:, k], :])
    return vec[:, 0]


def evaluate(tt: TensorTrain, index) -> float:
    return tt.evaluate(index)


def round_tt(tt: TensorTrain, rel_tolerance: float) -> TensorTrain:
    """TT-SVD rounding to a relative Frobenius tolerance.

    A tolerance of zero returns ``tt`` itself.
    """
    if rel_tolerance < 0:
        raise ValueError("rel_tolerance must be non-negative")
    if rel_tolerance == 0 or tt.ndim == 1:
        return tt
    cores = [c.copy() for c in tt.cores]
    d = len(cores)
    # right-to-left orthogonalisation
    for k in range(d - 1, 0, -1):
        r, n, s = cores[k].shape
        q, rr = np.linalg.qr(cores[k].reshape(r, n * s).T)
        cores[k] = q.T.reshape(-1, n, s)
        cores[k - 1] = np.einsum("anb,cb->anc", cores[k - 1], rr)
    norm = np.linalg.norm(cores[0])
    delta = rel_tolerance * norm / np.sqrt(d - 1)
    for k in range(d - 1):
        r, n, s = cores[k].shape
        u, sv, vt = np.linalg.svd(cores[k].reshape(r * n, s), full_matrices=False)
        keep = _truncation_rank(sv, delta)
        cores[k] = u[:, :keep].reshape(r, n, keep)
        carry = sv[:keep, None] * vt[:keep]
        cores[k + 1] = np.einsum("ab,bnc->anc", carry, cores[k + 1])
    return TensorTrain(tuple(cores))


def _truncation_rank(sv: np.ndarray, abs_tol: float) -> int:
    # smallest rank whose discarded tail has Frobenius norm <= abs_tol
    tail = np.sqrt(np.cumsum(sv[::-1] ** 2))[::-1]
    keep = int(np.sum(tail > abs_tol))
    return max(keep, 1)


def maxvol(a: np.ndarray, tol: float = 1.05, max_iters: int = 200) -> np.ndarray:
    """Rows of a tall matrix spanning a submatrix of near-maximal volume."""
    m, r = a.shape
    if m <= r:
        return np.arange(m)
    _, _, piv = scipy.linalg.qr(a.T, pivoting=True, mode="economic")
    idx = piv[:r].copy()
    try:
        b = np.linalg.solve(a[idx].T, a.T).T
    except np.linalg.LinAlgError:
        return idx
    for _ in range(max_iters):
        i, j = np.unravel_index(np.argmax(np.abs(b)), b.shape)
        if abs(b[i, j]) <= tol:
            break
        idx[j] = i
        bij = b[i, j]
        col = b[:, j].copy()
        row = b[i, :].copy()
        row[j] -= 1.0
        b -= np.outer(col, row) / bij
    return idx


class _CountingEvaluator:
    def __init__(self, f: BatchEvaluator):
        self.f = f
        self.n_evals = 0

    def __call__(self, idx: np.ndarray) -> np.ndarray:
        if idx.shape[0] == 0:
            return np.zeros(0)
        vals = np.asarray(self.f(idx), dtype=float).reshape(-1)
        if vals.shape[0] != idx.shape[0]:
            raise ValueError("evaluator returned the wrong number of values")
        self.n_evals += idx.shape[0]
        bad = ~np.isfinite(vals)
        if np.any(bad):
            raise NonFiniteValueError(idx[np.argmax(bad)])
        return vals


def _fibre_indices(left: np.ndarray, n: int, right: np.ndarray) -> np.ndarray:
    """All points ``(left[a], i, right[b])`` ordered as ``(a, i, b)``."""
    ra, rb = left.shape[0], right.shape[0]
    a, i, b = np.meshgrid(np.arange(ra), np.arange(n), np.arange(rb), indexing="ij")
    a, i, b = a.ravel(), i.ravel(), b.ravel()
    return np.hstack([left[a], i[:, None], right[b]]).astype(int)


def cross_build(
    f: BatchEvaluator,
    mode_sizes,
    config: CrossConfig = CrossConfig(),
) -> TensorTrain:
    """Approximate a grid function by a tensor train using ALS-cross.

    Parameters
    ----------
    f : callable
        Maps an integer array of multi-indices, shape ``(N, d)``, to ``N``
        real values. Must be deterministic.
    mode_sizes : sequence of int
        Grid size per dimension.
    config : CrossConfig

    Returns
    -------
    TensorTrain
        With ``info`` holding the evaluation count, convergence flag, the
        per-sweep relative errors and the mean-square residual of the last
        sweep (measured on the freshly sampled fibres).
    """
    sizes = [int(n) for n in mode_sizes]
    d = len(sizes)
    if d == 0 or min(sizes) < 1:
        raise ValueError("mode sizes must be positive")
    rng = np.random.default_rng(config.seed)
    fe = _CountingEvaluator(f)

    if d == 1:
        vals = fe(np.arange(sizes[0])[:, None])
        info = CrossInfo(fe.n_evals, 1, True, (0.0,), 0.0)
        return TensorTrain((vals.reshape(1, -1, 1),), info=info)

    # bond k sits between dims k-1 and k
    caps = [1] + [
        int(min(config.max_rank, np.prod(sizes[:k], dtype=float), np.prod(sizes[k:], dtype=float)))
        for k in range(1, d)
    ] + [1]

    r0 = [1] + [min(config.init_rank, caps[k]) for k in range(1, d)] + [1]
    left = [np.zeros((1, 0), dtype=int) for _ in range(d + 1)]
    right = [np.zeros((1, 0), dtype=int) for _ in range(d + 1)]
    for k in range(d - 1, 0, -1):
        right[k] = _random_indices(rng, sizes[k:], r0[k])

    cores: list[np.ndarray | None] = [None] * d
    prev: tuple[np.ndarray, ...] | None = None
    errors: list[float] = []
    msr = np.inf
    converged = False
    n_sweeps = 0
    rho = config.enrichment_rank
    abs_tol_rel = config.rel_tolerance / np.sqrt(d - 1)
    turnaround = None  # (k, points, values) of the last fibre of a sweep

    for sweep in range(config.max_sweeps):
        n_sweeps += 1
        forward = sweep % 2 == 0
        sq_err = 0.0
        sq_norm = 0.0
        n_pts = 0
        order = range(d) if forward else range(d - 1, -1, -1)
        for k in order:
            pts = _fibre_indices(left[k], sizes[k], right[k + 1])
            if turnaround is not None and turnaround[0] == k and np.array_equal(turnaround[1], pts):
                vals = turnaround[2]
            else:
                vals = fe(pts)
            if prev is not None:
                pred = _contract(prev, pts)
                sq_err += float(np.sum((pred - vals) ** 2))
                n_pts += pts.shape[0]
            sq_norm += float(np.sum(vals**2))
            ra, rb = left[k].shape[0], right[k + 1].shape[0]
            fib = vals.reshape(ra, sizes[k], rb)
            last = (forward and k == d - 1) or (not forward and k == 0)
            if last:
                cores[k] = fib
                turnaround = (k, pts, vals)
                continue
            if forward:
                mat = fib.reshape(ra * sizes[k], rb)
                if rho > 0:
                    extra = _random_indices(rng, sizes[k + 1:], rho)
                    epts = _fibre_indices(left[k], sizes[k], extra)
                    mat = np.hstack([mat, fe(epts).reshape(ra * sizes[k], rho)])
                basis = _column_basis(mat, abs_tol_rel, caps[k + 1])
                idx = maxvol(basis)
                core = np.linalg.solve(basis[idx].T, basis.T).T
                cores[k] = core.reshape(ra, sizes[k], -1)
                a, i = np.divmod(idx, sizes[k])
                left[k + 1] = np.hstack([left[k][a], i[:, None]])
            else:
                mat = fib.transpose(1, 2, 0).reshape(sizes[k] * rb, ra)
                if rho > 0:
                    extra = _random_indices(rng, sizes[:k], rho)
                    epts = _fibre_indices(extra, sizes[k], right[k + 1])
                    e = fe(epts).reshape(rho, sizes[k], rb).transpose(1, 2, 0)
                    mat = np.hstack([mat, e.reshape(sizes[k] * rb, rho)])
                basis = _column_basis(mat, abs_tol_rel, caps[k])
                idx = maxvol(basis)
                core = np.linalg.solve(basis[idx].T, basis.T).T
                cores[k] = core.reshape(sizes[k], rb, -1).transpose(2, 0, 1)
                i, b = np.divmod(idx, rb)
                right[k] = np.hstack([i[:, None], right[k + 1][b]])
        prev = tuple(np.asarray(c) for c in cores)
        if n_pts:
            err = np.sqrt(sq_err / max(sq_norm, np.finfo(float).tiny))
            errors.append(float(err))
            msr = sq_err / n_pts
            logger.debug("cross sweep %d: rel err %.3e, ranks %s", sweep, err,
                         [c.shape[2] for c in prev])
            if err < config.rel_tolerance:
                converged = True
                break
    if not converged and config.max_sweeps > 1:
        warnings.warn(
            f"cross did not reach rel_tolerance={config.rel_tolerance:g} "
            f"in {config.max_sweeps} sweeps (last error {errors[-1] if errors else np.nan:.3e})",
            CrossConvergenceWarning,
            stacklevel=2,
        )
    if not np.isfinite(msr):
        msr = 0.0
    info = CrossInfo(fe.n_evals, n_sweeps, converged, tuple(errors), float(msr))
    return TensorTrain(prev, info=info)


def _column_basis(mat: np.ndarray, rel_tol: float, cap: int) -> np.ndarray:
    u, sv, _ = np.linalg.svd(mat, full_matrices=False)
    if sv[0] == 0.0:
        return u[:, :1]
    keep = _truncation_rank(sv, rel_tol * np.linalg.norm(sv))
    keep = min(keep, cap, u.shape[1])
    return u[:, :keep]


def _random_indices(rng: np.random.Generator, sizes, count: int) -> np.ndarray:
    if len(sizes) == 0:
        return np.zeros((1, 0), dtype=int)
    return np.column_stack([rng.integers(0, n, size=count) for n in sizes]).astype(int)
