"""Periodic finite-element homogenization of a unidirectional fiber RVE.

The unit cell is a square of pixels, each a bilinear quadrilateral of either
fiber or matrix. For every unit macroscopic strain the periodic fluctuation
field is solved for and the volume-averaged stress gives one column of the
homogenized stiffness.

Voigt order with engineering shear strain:

* ``m = 3``: (11, 22, 12), plane strain.
* ``m = 4``: (11, 22, 33, 12), generalized plane strain. The out-of-plane
  normal strain is a macroscopic load but has no fluctuation.
* ``m = 6``: (11, 22, 33, 23, 13, 12); bounds only.
"""

from __future__ import annotations

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .artifacts import atomic_write_text

logger = logging.getLogger(__name__)

_VOIGT_INDEX = {3: [0, 1, 5], 4: [0, 1, 2, 5], 6: [0, 1, 2, 3, 4, 5]}
PAPER_RANGES = ((0.4, 0.7), (50.0, 80.0), (2.0, 5.0))


class SolverError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


def in_plane_rows(m: int) -> list[int]:
    """Positions of (11, 22, 12) in the Voigt vector of size ``m``."""
    return {3: [0, 1, 2], 4: [0, 1, 3], 6: [0, 1, 5]}[m]


def isotropic_stiffness(E: float, nu: float, m: int = 3) -> np.ndarray:
    """Isotropic stiffness restricted to the Voigt components of size ``m``."""
    if m not in _VOIGT_INDEX:
        raise ValueError("m must be 3, 4 or 6")
    if not E > 0 or not -1.0 < nu < 0.5:
        raise ValueError("need E > 0 and -1 < nu < 0.5")
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    c = np.zeros((6, 6))
    c[:3, :3] = lam
    c[np.arange(3), np.arange(3)] += 2 * mu
    c[np.arange(3, 6), np.arange(3, 6)] = mu
    idx = _VOIGT_INDEX[m]
    return c[np.ix_(idx, idx)]


def plane_stress_condense(c4: np.ndarray) -> np.ndarray:
    """Plane-stress stiffness from a (11, 22, 33, 12) stiffness.

    Imposing ``sigma_33 = 0`` eliminates ``eps_33``:
    ``C_ps = C_ab - C_a3 C_3b / C_33`` for ``a, b`` in (11, 22, 12).
    """
    c4 = np.asarray(c4, dtype=float)
    keep = [0, 1, 3]
    ab = c4[..., keep, :][..., :, keep]
    a3 = c4[..., keep, 2]
    return ab - a3[..., :, None] * a3[..., None, :] / c4[..., 2, 2][..., None, None]


@dataclass(frozen=True)
class PhaseProperties:
    """Young's moduli (GPa) and Poisson ratios of fiber and matrix."""

    E_f: float
    E_m: float
    nu_f: float = 0.22
    nu_m: float = 0.35

    def stiffness(self, m: int = 3) -> tuple[np.ndarray, np.ndarray]:
        return isotropic_stiffness(self.E_f, self.nu_f, m), isotropic_stiffness(self.E_m, self.nu_m, m)


@dataclass(frozen=True, eq=False)
class VoigtBounds:
    """Voigt and Reuss bounds with a factor ``L`` of their gap.

    ``C_V - C_R = Q Lambda Q^T`` with eigenvalues floored at ``eps_floor``;
    ``L = Q sqrt(Lambda) Q^T`` is the symmetric square root, so ``L L^T``
    reproduces the gap and ``L`` varies smoothly with the phase data even
    where eigenvalues repeat.
    """

    C_V: np.ndarray
    C_R: np.ndarray
    L: np.ndarray
    L_pinv: np.ndarray
    eps_floor: float

    @property
    def m(self) -> int:
        return self.C_V.shape[0]


def _factor_gap(c_v: np.ndarray, c_r: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    gap = 0.5 * ((c_v - c_r) + (c_v - c_r).T)
    lam, q = np.linalg.eigh(gap)
    lam_max = float(lam.max())
    if lam_max > 1e-12 * np.linalg.norm(c_v, 2):
        eps = 1e-8 * lam_max
    else:
        # zero contrast: a floor far below rounding keeps L invertible
        lam = np.zeros_like(lam)
        eps = 1e-150
    s = np.sqrt(np.maximum(lam, eps))
    # symmetric root: independent of the eigenbasis chosen inside repeated eigenvalues
    return (q * s) @ q.T, (q / s) @ q.T, eps


def voigt_reuss_bounds(phases: PhaseProperties, v_f: float, m: int = 3) -> VoigtBounds:
    """Voigt (arithmetic) and Reuss (harmonic) bounds for fiber fraction ``v_f``."""
    if not 0.0 <= v_f <= 1.0:
        raise ValueError("v_f must lie in [0, 1]")
    c_f, c_m = phases.stiffness(m)
    return bounds_from_phases(c_f, c_m, v_f)


def bounds_from_phases(c_f: np.ndarray, c_m: np.ndarray, v_f: float) -> VoigtBounds:
    try:
        s_f, s_m = np.linalg.inv(c_f), np.linalg.inv(c_m)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular phase stiffness") from exc
    c_v = v_f * c_f + (1 - v_f) * c_m
    c_r = np.linalg.inv(v_f * s_f + (1 - v_f) * s_m)
    c_r = 0.5 * (c_r + c_r.T)
    L, L_pinv, eps = _factor_gap(c_v, c_r)
    return VoigtBounds(c_v, c_r, L, L_pinv, eps)


def batch_bounds(chi: np.ndarray, m: int = 3, nu_f: float = 0.22, nu_m: float = 0.35):
    """Bounds for rows ``(v_f, E_f, E_m)``, vectorized.

    Returns ``C_V, C_R, L, L_pinv`` stacked along the first axis.
    """
    chi = np.atleast_2d(np.asarray(chi, dtype=float))
    v, ef, em = chi[:, 0], chi[:, 1], chi[:, 2]
    unit_f = isotropic_stiffness(1.0, nu_f, m)
    unit_m = isotropic_stiffness(1.0, nu_m, m)
    c_f = ef[:, None, None] * unit_f
    c_m = em[:, None, None] * unit_m
    s_f = np.linalg.inv(unit_f) / ef[:, None, None]
    s_m = np.linalg.inv(unit_m) / em[:, None, None]
    vv = v[:, None, None]
    c_v = vv * c_f + (1 - vv) * c_m
    c_r = np.linalg.inv(vv * s_f + (1 - vv) * s_m)
    c_r = 0.5 * (c_r + np.swapaxes(c_r, 1, 2))
    gap = c_v - c_r
    gap = 0.5 * (gap + np.swapaxes(gap, 1, 2))
    lam, q = np.linalg.eigh(gap)
    lam_max = lam.max(axis=1)
    scale = np.linalg.norm(c_v, ord=2, axis=(1, 2))
    collapsed = lam_max <= 1e-12 * scale
    lam = np.where(collapsed[:, None], 0.0, lam)
    eps = np.where(collapsed, 1e-150, 1e-8 * lam_max)
    s = np.sqrt(np.maximum(lam, eps[:, None]))
    qt = np.swapaxes(q, 1, 2)
    L = (q * s[:, None, :]) @ qt
    L_pinv = (q / s[:, None, :]) @ qt
    return c_v, c_r, L, L_pinv


# -- RVE geometry -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RVEGrid:
    """Pixel phase map of the unit cell; ``True`` marks fiber."""

    mask: np.ndarray
    v_f_target: float

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]

    @property
    def v_f_realized(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def disk(cls, v_f: float, resolution: int = 64) -> "RVEGrid":
        """Centered fiber made of the pixels nearest the center.

        Pixels are added in mirror pairs about the vertical center line, so
        the phase map is reflection symmetric (no normal-shear coupling) and
        its area is within one pixel of the target fraction.
        """
        if resolution < 8:
            raise ValueError("resolution must be at least 8")
        if not 0.0 <= v_f <= 1.0:
            raise ValueError("v_f must lie in [0, 1]")
        n = resolution
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        r2 = (2 * i + 1 - n) ** 2 + (2 * j + 1 - n) ** 2
        side = np.minimum(i, n - 1 - i)
        order = np.lexsort((i.ravel(), side.ravel(), j.ravel(), r2.ravel()))
        k = min(n * n, 2 * int(round(v_f * n * n / 2.0)))
        mask = np.zeros(n * n, dtype=bool)
        mask[order[:k]] = True
        return cls(mask.reshape(n, n), v_f)


# -- periodic FE ---------------------------------------------------------------

_GAUSS = np.array([-1.0, 1.0]) / math.sqrt(3.0)


def _q4_b_matrices(h: float) -> np.ndarray:
    """In-plane strain-displacement matrices (3 x 8) at the 2x2 Gauss points."""
    xi_n = np.array([-1.0, 1.0, 1.0, -1.0])
    eta_n = np.array([-1.0, -1.0, 1.0, 1.0])
    out = []
    for eta in _GAUSS:
        for xi in _GAUSS:
            dn_dx = 0.25 * xi_n * (1 + eta * eta_n) * (2.0 / h)
            dn_dy = 0.25 * eta_n * (1 + xi * xi_n) * (2.0 / h)
            b = np.zeros((3, 8))
            b[0, 0::2] = dn_dx
            b[1, 1::2] = dn_dy
            b[2, 0::2] = dn_dy
            b[2, 1::2] = dn_dx
            out.append(b)
    return np.array(out)


@dataclass
class RVESolution:
    C_hom: np.ndarray
    hill_mandel: np.ndarray
    residual: float
    v_f_realized: float


def solve_rve(grid: RVEGrid, phases: PhaseProperties, m: int = 3) -> RVESolution:
    """Homogenized stiffness of a pixel RVE under periodic boundary conditions.

    Returns the symmetrized ``C_hom`` together with the relative Hill-Mandel
    defect ``|<sigma : eps> - sigma_bar : eps_bar| / |sigma_bar : eps_bar|`` of
    each load case.
    """
    if m not in (3, 4):
        raise NotImplementedError("pixel RVE solves support m = 3 and m = 4 only")
    n = grid.resolution
    h = 1.0 / n
    c_f, c_m = phases.stiffness(m)
    rows_in = in_plane_rows(m)
    b_gp = _q4_b_matrices(h)
    w_gp = h * h / 4.0
    b_bar = b_gp.mean(axis=0)

    # element matrices for both phases
    phase_c = [c_m, c_f]
    ke = [sum(w_gp * bq.T @ c[np.ix_(rows_in, rows_in)] @ bq for bq in b_gp) for c in phase_c]

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    corner = np.stack([i + n * j, (i + 1) % n + n * j, (i + 1) % n + n * ((j + 1) % n),
                       i + n * ((j + 1) % n)], axis=1)
    dofs = np.empty((n * n, 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * corner
    dofs[:, 1::2] = 2 * corner + 1
    phase = grid.mask.ravel().astype(int)
    ndof = 2 * n * n

    vals = np.stack(ke)[phase].reshape(-1)
    r = np.repeat(dofs, 8, axis=1).ravel()
    c = np.tile(dofs, (1, 8)).ravel()
    k_full = sp.coo_matrix((vals, (r, c)), shape=(ndof, ndof)).tocsc()

    # element force for unit macro strains: -int B^T (C eps)_in
    eye = np.eye(m)
    fe = np.stack([-(b_bar.T @ (cp @ eye)[rows_in]) * h * h for cp in phase_c])  # (2, 8, m)
    f = np.zeros((ndof, m))
    for k in range(m):
        np.add.at(f[:, k], dofs.ravel(), fe[phase, :, k].ravel())

    free = np.arange(2, ndof)  # node 0 pinned
    k_red = k_full[free][:, free].tocsc()
    lu = splu(k_red)
    u = np.zeros((ndof, m))
    u[free] = lu.solve(f[free])
    ku = k_full @ u
    residual = float(np.linalg.norm(ku[free] - f[free]) / max(np.linalg.norm(f), 1e-300))
    if not np.isfinite(residual) or residual > 1e-8:
        raise SolverError("periodic RVE solve failed", residual)

    frac = [1.0 - grid.v_f_realized, grid.v_f_realized]
    ue = u[dofs]  # (n_el, 8, m)
    sigma = np.zeros((m, m))
    cross = np.zeros(m)
    for p in (0, 1):
        sel = phase == p
        if not np.any(sel):
            continue
        usum = ue[sel].sum(axis=0)  # (8, m)
        fluct = np.zeros((m, m))
        fluct[rows_in] = b_bar @ usum * h * h
        sigma += phase_c[p] @ (frac[p] * eye + fluct)
        cross += np.einsum("ik,ik->k", eye, phase_c[p] @ fluct)
    c_v = frac[0] * c_m + frac[1] * c_f
    energy = np.diag(c_v) + 2.0 * cross + np.einsum("ik,ik->k", u, ku)
    macro = np.diag(sigma)
    hm = np.abs(energy - macro) / np.abs(macro)
    c_hom = 0.5 * (sigma + sigma.T)
    return RVESolution(c_hom, hm, residual, grid.v_f_realized)


def homogenize(chi, m: int = 3, resolution: int = 64, nu_f: float = 0.22,
               nu_m: float = 0.35) -> np.ndarray:
    """``C_hom`` for ``chi = (v_f, E_f, E_m)``."""
    v_f, e_f, e_m = chi
    return solve_rve(RVEGrid.disk(v_f, resolution), PhaseProperties(e_f, e_m, nu_f, nu_m), m).C_hom


# -- dataset -------------------------------------------------------------------


@dataclass(eq=False)
class RVEDataset:
    """Homogenization records ``(chi, C_hom, C_V, C_R)`` with a train/validation split."""

    chi: np.ndarray
    C_hom: np.ndarray
    C_V: np.ndarray
    C_R: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    m: int
    resolution: int
    seed: int
    nu_f: float = 0.22
    nu_m: float = 0.35
    hill_mandel: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.chi.shape[0]

    def bounds(self, i: int) -> VoigtBounds:
        L, L_pinv, eps = _factor_gap(self.C_V[i], self.C_R[i])
        return VoigtBounds(self.C_V[i], self.C_R[i], L, L_pinv, eps)

    def save(self, path) -> None:
        iu = np.triu_indices(self.m)
        lines = [f"# m {self.m} resolution {self.resolution} seed {self.seed} "
                 f"nu_f {self.nu_f!r} nu_m {self.nu_m!r}",
                 "# validation " + " ".join(str(int(i)) for i in self.val_idx)]
        for k in range(len(self)):
            row = np.concatenate([self.chi[k], self.C_hom[k][iu], self.C_V[k][iu], self.C_R[k][iu]])
            lines.append(" ".join(f"{x:.17g}" for x in row))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "RVEDataset":
        with open(path) as fh:
            head = fh.readline().split()[1:]
            meta = dict(zip(head[0::2], head[1::2]))
            val = np.array([int(t) for t in fh.readline().split()[2:]], dtype=int)
            data = np.loadtxt(fh, ndmin=2)
        m = int(meta["m"])
        t = m * (m + 1) // 2
        iu = np.triu_indices(m)

        def unpack(block):
            out = np.zeros((block.shape[0], m, m))
            out[:, iu[0], iu[1]] = block
            out[:, iu[1], iu[0]] = block
            return out

        n = data.shape[0]
        train = np.setdiff1d(np.arange(n), val)
        return cls(data[:, :3], unpack(data[:, 3:3 + t]), unpack(data[:, 3 + t:3 + 2 * t]),
                   unpack(data[:, 3 + 2 * t:3 + 3 * t]), train, val, m, int(meta["resolution"]),
                   int(meta["seed"]), float(meta["nu_f"]), float(meta["nu_m"]))


def _solve_record(args):
    chi, m, resolution, nu_f, nu_m = args
    try:
        sol = solve_rve(RVEGrid.disk(chi[0], resolution), PhaseProperties(chi[1], chi[2], nu_f, nu_m), m)
    except (SolverError, np.linalg.LinAlgError, RuntimeError) as exc:
        logger.warning("RVE solve failed for chi=%s: %s", chi, exc)
        return None
    return sol


def generate_dataset(n: int, ranges=PAPER_RANGES, resolution: int = 64, seed: int = 0, m: int = 3,
                     nu_f: float = 0.22, nu_m: float = 0.35, train_fraction: float = 0.8,
                     workers: int = 1) -> RVEDataset:
    """Sample ``(v_f, E_f, E_m)`` uniformly in ``ranges`` and homogenize each.

    Each record stores the realized pixel fiber fraction, so its bounds
    enclose its stiffness. Failed solves are skipped and logged. The split is a seeded random
    permutation with ``round(train_fraction * N)`` training records.
    """
    if n < 1:
        raise ValueError("N must be at least 1")
    lo = np.array([r[0] for r in ranges], dtype=float)
    hi = np.array([r[1] for r in ranges], dtype=float)
    if lo.shape != (3,) or np.any(hi < lo):
        raise ValueError("ranges must be three (low, high) pairs")
    rng = np.random.default_rng(seed)
    chi = lo + (hi - lo) * rng.random((n, 3))
    jobs = [(row, m, resolution, nu_f, nu_m) for row in chi]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            sols = list(pool.map(_solve_record, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        sols = [_solve_record(j) for j in jobs]
    keep = [k for k, s in enumerate(sols) if s is not None]
    chi = chi[keep]
    # record the fiber fraction the pixel cell actually has
    chi[:, 0] = [sols[k].v_f_realized for k in keep]
    c_hom = np.array([sols[k].C_hom for k in keep]).reshape(-1, m, m)
    hm = np.array([sols[k].hill_mandel for k in keep]).reshape(-1, m)
    c_v, c_r, _, _ = batch_bounds(chi, m, nu_f, nu_m) if keep else (np.zeros((0, m, m)),) * 4
    perm = rng.permutation(len(keep))
    n_train = int(round(train_fraction * len(keep)))
    return RVEDataset(chi, c_hom, c_v, c_r, np.sort(perm[:n_train]), np.sort(perm[n_train:]), m,
                      resolution, seed, nu_f, nu_m, hm)
