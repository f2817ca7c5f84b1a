"""Plane-stress plate with a central hole: mesh, linear-triangle solve,
strain sensors, Gaussian likelihood and the von Mises performance function.

Units: lengths in mm, forces in N, stresses in MPa. Stiffnesses enter in GPa
(as produced by homogenization) and are converted internally.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .artifacts import atomic_write_text
from .micromech import homogenize, plane_stress_condense

GPA_TO_MPA = 1e3


class MeshError(ValueError):
    pass


class SetupError(RuntimeError):
    pass


class LocationError(ValueError):
    pass


# -- mesh ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with named node sets (``left``, ``right``, ``hole``)."""

    nodes: np.ndarray
    elements: np.ndarray
    sets: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        elems = np.array(self.elements, dtype=np.int64)
        nodes.setflags(write=False)
        elems.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elems)
        object.__setattr__(self, "sets", {k: np.asarray(v, dtype=np.int64) for k, v in self.sets.items()})

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @functools.cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @functools.cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @functools.cached_property
    def b_matrices(self) -> np.ndarray:
        """Constant strain-displacement matrices ``(M, 3, 6)``."""
        p = self.nodes[self.elements]
        x, y = p[:, :, 0], p[:, :, 1]
        b = y[:, [1, 2, 0]] - y[:, [2, 0, 1]]
        c = x[:, [2, 0, 1]] - x[:, [1, 2, 0]]
        out = np.zeros((self.n_elements, 3, 6))
        two_a = 2.0 * self.areas
        out[:, 0, 0::2] = b / two_a[:, None]
        out[:, 1, 1::2] = c / two_a[:, None]
        out[:, 2, 0::2] = c / two_a[:, None]
        out[:, 2, 1::2] = b / two_a[:, None]
        return out

    @functools.cached_property
    def element_dofs(self) -> np.ndarray:
        d = np.empty((self.n_elements, 6), dtype=np.int64)
        d[:, 0::2] = 2 * self.elements
        d[:, 1::2] = 2 * self.elements + 1
        return d

    def save(self, path) -> None:
        lines = [f"nodes {self.n_nodes}"]
        lines += [f"{x!r} {y!r}" for x, y in self.nodes.tolist()]
        lines.append(f"elements {self.n_elements}")
        lines += [" ".join(str(int(i) + 1) for i in e) for e in self.elements]
        for name, idx in self.sets.items():
            lines.append(f"set {name} {len(idx)} " + " ".join(str(int(i) + 1) for i in idx))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Mesh":
        with open(path) as fh:
            lines = fh.read().splitlines()
        n = int(lines[0].split()[1])
        nodes = np.array([[float(t) for t in ln.split()] for ln in lines[1:1 + n]])
        m = int(lines[1 + n].split()[1])
        elems = np.array([[int(t) - 1 for t in ln.split()] for ln in lines[2 + n:2 + n + m]])
        sets = {}
        for ln in lines[2 + n + m:]:
            tok = ln.split()
            if tok and tok[0] == "set":
                sets[tok[1]] = np.array([int(t) - 1 for t in tok[3:]], dtype=np.int64)
        return cls(nodes, elems, sets)


def generate_plate_mesh(width: float = 100.0, height: float = 100.0, hole_radius: float = 10.0,
                        nx: int = 24, ny: int | None = None) -> Mesh:
    """Structured triangulation of a rectangle with a central circular hole.

    Each grid cell is split along alternating diagonals. Triangles whose
    centroid lies inside the hole are removed and the nodes they share with
    the remaining triangles are projected radially onto the circle.
    """
    ny = nx if ny is None else ny
    if nx < 1 or ny < 1:
        raise MeshError("refinement must be positive")
    if not 0.0 <= hole_radius < 0.5 * min(width, height):
        raise MeshError("hole radius must be below half the smaller plate side")
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    tris = np.array(tris, dtype=np.int64)
    center = np.array([0.5 * width, 0.5 * height])
    hole = np.zeros(0, dtype=np.int64)
    if hole_radius > 0:
        h = min(width / nx, height / ny)
        if hole_radius < 1.5 * h:
            raise MeshError("refinement too coarse to resolve the hole")
        cen = nodes[tris].mean(axis=1)
        inside = np.linalg.norm(cen - center, axis=1) < hole_radius
        keep_nodes = np.unique(tris[~inside])
        drop_nodes = np.unique(tris[inside])
        hole = np.intersect1d(keep_nodes, drop_nodes)
        v = nodes[hole] - center
        nodes[hole] = center + hole_radius * v / np.linalg.norm(v, axis=1)[:, None]
        tris = tris[~inside]
    used = np.unique(tris)
    remap = -np.ones(nodes.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    nodes = nodes[used]
    tris = remap[tris]
    left = np.flatnonzero(np.isclose(nodes[:, 0], 0.0))
    right = np.flatnonzero(np.isclose(nodes[:, 0], width))
    right = right[np.argsort(nodes[right, 1])]
    sets = {"left": left, "right": right}
    if hole.size:
        sets["hole"] = np.sort(remap[hole])
    mesh = Mesh(nodes, tris, sets)
    if np.any(mesh.areas <= 0.05 * 0.5 * (width / nx) * (height / ny)):
        raise MeshError("refinement too coarse to resolve the hole")
    return mesh


# -- solve -----------------------------------------------------------------------


@dataclass(frozen=True)
class LoadCase:
    """Total force ``force`` (N) spread uniformly over the right edge.

    ``support="clamped"`` fixes both components on the left edge;
    ``"roller"`` fixes only ``u_x`` there plus ``u_y`` at the lowest left node,
    which lets a uniform uniaxial stress state develop.
    """

    force: float = 1000.0
    thickness: float = 10.0
    support: str = "clamped"

    def __post_init__(self):
        if not math.isfinite(self.force) or not self.thickness > 0:
            raise ValueError("force must be finite and thickness positive")
        if self.support not in ("clamped", "roller"):
            raise ValueError(f"unknown support {self.support!r}")

    def fixed_dofs(self, mesh: Mesh) -> np.ndarray:
        left = mesh.sets["left"]
        if np.intersect1d(left, mesh.sets["right"]).size:
            raise SetupError("fixed and loaded edges share nodes")
        if self.support == "clamped":
            return np.sort(np.concatenate([2 * left, 2 * left + 1]))
        low = left[np.argmin(mesh.nodes[left, 1])]
        return np.sort(np.append(2 * left, 2 * low + 1))


@dataclass
class ForwardSolution:
    displacement: np.ndarray
    strain: np.ndarray
    stress: np.ndarray
    reaction: np.ndarray

    @property
    def von_mises(self) -> np.ndarray:
        return von_mises(self.stress)

    @property
    def max_von_mises(self) -> float:
        return float(self.von_mises.max())


def write_results(path, sol: ForwardSolution) -> None:
    """CSV of nodal displacements followed by element stresses."""
    lines = ["kind,index,c0,c1,c2"]
    lines += [f"node,{i},{u[0]!r},{u[1]!r}," for i, u in enumerate(sol.displacement.tolist())]
    lines += [f"element,{i},{s[0]!r},{s[1]!r},{s[2]!r}" for i, s in enumerate(sol.stress.tolist())]
    atomic_write_text(path, "\n".join(lines) + "\n")


def von_mises(stress) -> np.ndarray:
    s = np.asarray(stress)
    sx, sy, txy = s[..., 0], s[..., 1], s[..., 2]
    return np.sqrt(sx**2 - sx * sy + sy**2 + 3.0 * txy**2)


class _Assembler:
    """Sparse pattern of the global stiffness, reused across solves on one mesh."""

    def __init__(self, mesh: Mesh, fixed: np.ndarray):
        ndof = 2 * mesh.n_nodes
        dofs = mesh.element_dofs
        rows = np.repeat(dofs, 6, axis=1).ravel()
        cols = np.tile(dofs, (1, 6)).ravel()
        pattern = sp.csc_matrix((np.arange(rows.size, dtype=float) + 1, (rows, cols)),
                                shape=(ndof, ndof))
        # duplicate entries were summed; recover the slot of each element entry
        key = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(ndof, ndof)).tocsc()
        key.sum_duplicates()
        key.data = np.arange(key.nnz, dtype=float)
        self.slot = np.asarray(key[rows, cols]).ravel().astype(np.int64)
        self.indices, self.indptr, self.nnz = key.indices, key.indptr, key.nnz
        self.ndof = ndof
        del pattern
        self.fixed = np.asarray(fixed, dtype=np.int64)
        mask = np.ones(ndof, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)

    def matrix(self, ke: np.ndarray) -> sp.csc_matrix:
        data = np.bincount(self.slot, weights=ke.ravel(), minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.ndof, self.ndof))


@functools.lru_cache(maxsize=8)
def _assembler(mesh: Mesh, fixed_key: tuple) -> _Assembler:
    return _Assembler(mesh, np.array(fixed_key, dtype=np.int64))


def element_matrices(mesh: Mesh, stiffness_gpa: np.ndarray, thickness: float) -> np.ndarray:
    c = np.broadcast_to(np.asarray(stiffness_gpa, dtype=float) * GPA_TO_MPA, (mesh.n_elements, 3, 3))
    b = mesh.b_matrices
    return thickness * mesh.areas[:, None, None] * (np.swapaxes(b, 1, 2) @ c @ b)


def solve(mesh: Mesh, stiffness_gpa, thickness: float, fixed_dofs, fixed_values, forces) -> ForwardSolution:
    """Linear solve with prescribed displacements and nodal forces."""
    fixed_dofs = np.asarray(fixed_dofs, dtype=np.int64)
    asm = _assembler(mesh, tuple(fixed_dofs.tolist()))
    c = np.broadcast_to(np.asarray(stiffness_gpa, dtype=float), (mesh.n_elements, 3, 3))
    ke = element_matrices(mesh, c, thickness)
    k = asm.matrix(ke)
    u = np.zeros(asm.ndof)
    u[fixed_dofs] = fixed_values
    rhs = np.asarray(forces, dtype=float)[asm.free] - k[asm.free][:, fixed_dofs] @ u[fixed_dofs]
    try:
        lu = splu(k[asm.free][:, asm.free].tocsc())
    except RuntimeError as exc:
        raise SetupError(f"singular stiffness matrix: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    if piv.size and piv.min() <= 1e-12 * piv.max():
        raise SetupError("singular stiffness matrix (insufficient constraints)")
    u[asm.free] = lu.solve(rhs)
    if not np.all(np.isfinite(u)):
        raise SetupError("singular stiffness matrix")
    reaction = k @ u - forces
    strain = (mesh.b_matrices @ u[mesh.element_dofs][:, :, None])[:, :, 0]
    stress = (c @ strain[:, :, None])[:, :, 0] * GPA_TO_MPA
    return ForwardSolution(u.reshape(-1, 2), strain, stress, reaction.reshape(-1, 2))


def traction_forces(mesh: Mesh, load: LoadCase) -> np.ndarray:
    """Consistent nodal forces of a uniform x-traction on the right edge."""
    right = mesh.sets["right"]
    y = mesh.nodes[right, 1]
    seg = np.diff(y)
    q = load.force / (y[-1] - y[0])
    f = np.zeros(2 * mesh.n_nodes)
    np.add.at(f, 2 * right[:-1], 0.5 * q * seg)
    np.add.at(f, 2 * right[1:], 0.5 * q * seg)
    return f


def assemble_solve(mesh: Mesh, stiffness_gpa, load: LoadCase) -> ForwardSolution:
    """Plate clamped on the left edge and pulled on the right edge.

    ``stiffness_gpa`` is one plane-stress matrix or one per element.
    """
    fixed = load.fixed_dofs(mesh)
    return solve(mesh, stiffness_gpa, load.thickness, fixed, np.zeros(fixed.size),
                 traction_forces(mesh, load))


# -- observation -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SensorSet:
    points: np.ndarray
    noise_std: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))
        if not self.noise_std > 0:
            raise ValueError("noise standard deviation must be positive")

    @classmethod
    def ring_and_far_field(cls, width=100.0, height=100.0, hole_radius=10.0, n_ring=6,
                           ring_factor=1.8, noise_std=1e-5) -> "SensorSet":
        """Points on a ring around the hole plus four far-field points."""
        c = np.array([0.5 * width, 0.5 * height])
        ang = 2 * np.pi * (np.arange(n_ring) + 0.5) / n_ring
        ring = c + ring_factor * hole_radius * np.column_stack([np.cos(ang), np.sin(ang)])
        far = np.array([[0.2, 0.2], [0.8, 0.2], [0.2, 0.8], [0.8, 0.8]]) * [width, height]
        return cls(np.vstack([ring, far]), noise_std)

    def locate(self, mesh: Mesh) -> np.ndarray:
        """Containing element of every point; the lowest element index wins on shared edges."""
        p = mesh.nodes[mesh.elements]
        out = np.empty(len(self.points), dtype=np.int64)
        scale = np.sqrt(np.abs(mesh.areas).max())
        for k, x in enumerate(self.points):
            d = p - x
            # signed doubled areas of the sub-triangles
            s0 = d[:, 1, 0] * d[:, 2, 1] - d[:, 2, 0] * d[:, 1, 1]
            s1 = d[:, 2, 0] * d[:, 0, 1] - d[:, 0, 0] * d[:, 2, 1]
            s2 = d[:, 0, 0] * d[:, 1, 1] - d[:, 1, 0] * d[:, 0, 1]
            tol = -1e-12 * scale**2
            hit = np.flatnonzero((s0 >= tol) & (s1 >= tol) & (s2 >= tol))
            if hit.size == 0:
                raise LocationError(f"sensor {k} at {x} lies outside the mesh")
            out[k] = hit[0]
        return out


def observe(sol: ForwardSolution, element_index: np.ndarray) -> np.ndarray:
    """``(eps_xx, eps_yy)`` of the containing elements, sensor by sensor."""
    return sol.strain[element_index][:, :2].ravel()


def log_likelihood(y_model, y_obs, noise_std: float):
    """``-||y_obs - y_model||^2 / (2 sigma^2)``; works on batches along the first axis."""
    if not noise_std > 0:
        raise ValueError("noise standard deviation must be positive")
    r = np.asarray(y_obs, dtype=float) - np.asarray(y_model, dtype=float)
    return -0.5 * np.sum(r**2, axis=-1) / noise_std**2


def direct_stiffness(chi, m: int = 4, resolution: int = 64, nu_f: float = 0.22,
                     nu_m: float = 0.35) -> np.ndarray:
    """Element stiffnesses by full RVE homogenization, one solve per row of ``chi``."""
    chi = np.atleast_2d(np.asarray(chi, dtype=float))
    return np.stack([homogenize(row, m, resolution, nu_f, nu_m) for row in chi])


# -- performance -----------------------------------------------------------------


@dataclass(eq=False)
class PlateModel:
    """Maps KL coefficients to the plate response.

    Parameters
    ----------
    mesh, load, sensors
    fields : sequence of KLBasis
        Bases for ``v_f``, ``E_f`` and ``E_m`` on the mesh nodes, in that order.
    stiffness : callable
        ``chi (M, 3) -> C (M, m, m)`` in GPa; ``m = 4`` results are condensed
        to plane stress, ``m = 3`` results are used as given.
    sigma_allow : float
        Failure threshold on the maximum von Mises stress (MPa).
    y_obs : ndarray, optional
        Observed strains; enables the likelihood.
    """

    mesh: Mesh
    load: LoadCase
    sensors: SensorSet
    fields: tuple
    stiffness: Callable[[np.ndarray], np.ndarray]
    sigma_allow: float = 0.96
    y_obs: np.ndarray | None = None

    def __post_init__(self):
        self.fields = tuple(self.fields)
        if len(self.fields) != 3:
            raise ValueError("need three field bases (v_f, E_f, E_m)")
        self._sizes = [b.n_terms for b in self.fields]
        self._sensor_elems = self.sensors.locate(self.mesh)

    @property
    def dim(self) -> int:
        return sum(self._sizes)

    def split(self, xi) -> list[np.ndarray]:
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} coefficients, got {xi.shape[-1]}")
        return np.split(xi, np.cumsum(self._sizes)[:-1], axis=-1)

    def element_chi(self, xi) -> np.ndarray:
        """``(v_f, E_f, E_m)`` at element centroids (log-linear interpolation)."""
        cols = []
        for basis, part in zip(self.fields, self.split(xi)):
            g = basis.gaussian_part(part)
            mu = basis.marginal.mu_g if basis.marginal is not None else 0.0
            cols.append(np.exp(mu + g[self.mesh.elements].mean(axis=-1)))
        return np.stack(cols, axis=-1)

    def in_range(self, xi) -> np.ndarray:
        """Whether the fiber fraction stays inside (0, 1) at every node."""
        vf = self.fields[0].realize(self.split(xi)[0])
        return np.all((vf > 0) & (vf < 1), axis=-1)

    def element_stiffness(self, chi) -> np.ndarray:
        c = np.asarray(self.stiffness(chi))
        return plane_stress_condense(c) if c.shape[-1] == 4 else c

    def solve(self, xi) -> ForwardSolution:
        return assemble_solve(self.mesh, self.element_stiffness(self.element_chi(xi)), self.load)

    def observe(self, sol: ForwardSolution) -> np.ndarray:
        return observe(sol, self._sensor_elems)

    def response(self, theta) -> tuple[np.ndarray, np.ndarray | None]:
        """``(F, log L)`` for a batch; failed solves give ``nan``."""
        theta = np.atleast_2d(theta)
        f = np.full(theta.shape[0], np.nan)
        ll = np.full(theta.shape[0], np.nan) if self.y_obs is not None else None
        for i, xi in enumerate(theta):
            try:
                if not self.in_range(xi):
                    continue
                sol = self.solve(xi)
            except (SetupError, np.linalg.LinAlgError, FloatingPointError):
                continue
            f[i] = sol.max_von_mises
            if ll is not None:
                ll[i] = log_likelihood(self.observe(sol), self.y_obs, self.sensors.noise_std)
        return f, ll

    def performance(self, xi) -> tuple[np.ndarray, np.ndarray]:
        """``(g, F)`` with ``g = sigma_allow - F``."""
        f, _ = self.response(xi)
        return self.sigma_allow - f, f
