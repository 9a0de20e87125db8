"""Cell-centred two-point flux solver for ``u = -kappa grad p + g``, ``div u = q``.

Boundary edges carry one of three conditions:

* Neumann: prescribed outward normal velocity ``u.n``;
* Dirichlet: prescribed pressure;
* Robin: ``-beta * (u.n) + p = r`` with the face pressure extrapolated from the
  cell centre through the half-cell transmissibility.

An optional face field ``gravity`` adds a known velocity offset on every face
(``u = T (p_L - p_R)/len + gravity``). It carries the buoyancy term of the
pressure equation when gravity is on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CartesianGrid, FaceField, as_cell_field, divergence

NEUMANN, DIRICHLET, ROBIN = 0, 1, 2
SIDES = ("left", "right", "bottom", "top")


class CompatibilityError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


def face_transmissibility(k_left, k_right, dx, dy):
    """Harmonic-mean transmissibility of an x-face (length ``dy``, centre distance ``dx``).

    For a y-face pass the arguments as ``(k_below, k_above, dy, dx)``.
    """
    k_left = np.asarray(k_left, dtype=float)
    k_right = np.asarray(k_right, dtype=float)
    denom = k_left + k_right
    with np.errstate(divide="ignore", invalid="ignore"):
        harm = np.where(denom > 0, 2.0 * k_left * k_right / np.where(denom > 0, denom, 1.0), 0.0)
    return dy * harm / dx


def _side_len(grid: CartesianGrid, side: str) -> int:
    return grid.ny if side in ("left", "right") else grid.nx


@dataclass
class SideCondition:
    kind: np.ndarray
    value: np.ndarray
    beta: np.ndarray

    def copy(self) -> "SideCondition":
        return SideCondition(self.kind.copy(), self.value.copy(), self.beta.copy())


@dataclass
class BoundarySpec:
    """Per-edge boundary conditions on the four sides of a grid.

    Side arrays are ordered by increasing tangential coordinate (bottom to top
    for ``left``/``right``, left to right for ``bottom``/``top``). Neumann
    values are outward normal velocities.
    """

    grid: CartesianGrid
    sides: dict[str, SideCondition] = field(default_factory=dict)

    def __post_init__(self):
        for side in SIDES:
            if side not in self.sides:
                n = _side_len(self.grid, side)
                self.sides[side] = SideCondition(np.zeros(n, dtype=np.int8), np.zeros(n), np.zeros(n))

    @classmethod
    def no_flow(cls, grid: CartesianGrid) -> "BoundarySpec":
        return cls(grid)

    def copy(self) -> "BoundarySpec":
        return BoundarySpec(self.grid, {k: v.copy() for k, v in self.sides.items()})

    def _set(self, side, kind, value, beta, where):
        c = self.sides[side]
        idx = slice(None) if where is None else where
        c.kind[idx] = kind
        c.value[idx] = value
        c.beta[idx] = beta
        return self

    def set_neumann(self, side: str, velocity, where=None) -> "BoundarySpec":
        return self._set(side, NEUMANN, velocity, 0.0, where)

    def set_dirichlet(self, side: str, pressure, where=None) -> "BoundarySpec":
        return self._set(side, DIRICHLET, pressure, 0.0, where)

    def set_robin(self, side: str, beta, r, where=None) -> "BoundarySpec":
        if np.any(np.asarray(beta) <= 0):
            raise ValueError("Robin parameter must be positive")
        return self._set(side, ROBIN, r, beta, where)

    def has_pressure_anchor(self) -> bool:
        return any(np.any(c.kind != NEUMANN) for c in self.sides.values())

    def neumann_outflow(self) -> float:
        """Total prescribed outward flux through Neumann edges."""
        g = self.grid
        tot = 0.0
        for side, c in self.sides.items():
            length = g.dy if side in ("left", "right") else g.dx
            tot += float(np.sum(c.value[c.kind == NEUMANN]) * length)
        return tot


@dataclass
class EllipticSolution:
    p: np.ndarray
    u: FaceField
    residual: float


def _boundary_cells(grid: CartesianGrid, side: str) -> np.ndarray:
    nx, ny = grid.nx, grid.ny
    if side == "left":
        return np.arange(ny) * nx
    if side == "right":
        return np.arange(ny) * nx + nx - 1
    if side == "bottom":
        return np.arange(nx)
    return (ny - 1) * nx + np.arange(nx)


def _gravity_normal(gravity: FaceField | None, side: str) -> np.ndarray | float:
    """Outward normal component of the gravity offset on one side."""
    if gravity is None:
        return 0.0
    if side == "left":
        return -gravity.ux[:, 0]
    if side == "right":
        return gravity.ux[:, -1]
    if side == "bottom":
        return -gravity.uy[0, :]
    return gravity.uy[-1, :]


class TPFASystem:
    """Assembled and factorized TPFA operator for fixed ``kappa`` and boundary types/betas.

    The right-hand side depends on boundary values, sources and gravity
    offsets only, so several solves with different data share one
    factorization.
    """

    def __init__(self, grid: CartesianGrid, kappa, bc: BoundarySpec):
        self.grid = grid
        self.kappa = as_cell_field(grid, kappa)
        if np.any(~(self.kappa > 0)):
            raise ValueError("mobility-weighted permeability must be positive")
        self.kinds = {s: bc.sides[s].kind.copy() for s in SIDES}
        self.betas = {s: bc.sides[s].beta.copy() for s in SIDES}
        self.anchored = bc.has_pressure_anchor()
        self._assemble()
        self._lu = None

    def _assemble(self):
        g = self.grid
        nx, ny, n = g.nx, g.ny, g.ncells
        k = self.kappa
        idx = np.arange(n).reshape(ny, nx)
        self.tx = face_transmissibility(k[:, :-1], k[:, 1:], g.dx, g.dy)   # (ny, nx-1)
        self.ty = face_transmissibility(k[:-1, :], k[1:, :], g.dy, g.dx)   # (ny-1, nx)
        rows, cols, vals = [], [], []
        for left, right, t in ((idx[:, :-1], idx[:, 1:], self.tx), (idx[:-1, :], idx[1:, :], self.ty)):
            a, b, t = left.ravel(), right.ravel(), t.ravel()
            rows += [a, b, a, b]
            cols += [a, b, b, a]
            vals += [t, t, -t, -t]
        self.interior = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                      shape=(n, n)) if rows else sp.csr_matrix((n, n))
        diag = np.zeros(n)
        self.bface = {}
        for side in SIDES:
            cells = _boundary_cells(g, side)
            length, dist = (g.dy, g.dx) if side in ("left", "right") else (g.dx, g.dy)
            t_half = 2.0 * k.ravel()[cells] / dist          # per unit length
            kind, beta = self.kinds[side], self.betas[side]
            coef = np.zeros(cells.size)
            coef[kind == DIRICHLET] = t_half[kind == DIRICHLET]
            rob = kind == ROBIN
            coef[rob] = t_half[rob] / (1.0 + t_half[rob] * beta[rob])
            np.add.at(diag, cells, length * coef)
            self.bface[side] = (cells, length, t_half, coef)
        self.matrix = (self.interior + sp.diags(diag)).tocsc()

    def _factor(self):
        if self._lu is None:
            A = self.matrix
            if not self.anchored:
                n = A.shape[0]
                ones = sp.csc_matrix(np.ones((n, 1)))
                A = sp.bmat([[A, ones], [ones.T, None]], format="csc")
            try:
                self._lu = spla.splu(A)
            except RuntimeError as exc:
                raise SolverError(f"singular pressure system: {exc}") from exc
        return self._lu

    def rhs(self, bc: BoundarySpec, q=0.0, gravity: FaceField | None = None) -> np.ndarray:
        g = self.grid
        b = as_cell_field(g, q).ravel() * g.cell_volume
        if gravity is not None:
            gx = gravity.ux[:, 1:-1] * g.dy
            gy = gravity.uy[1:-1, :] * g.dx
            b = b.reshape(g.shape).copy()
            b[:, :-1] -= gx
            b[:, 1:] += gx
            b[:-1, :] -= gy
            b[1:, :] += gy
            b = b.ravel()
        for side in SIDES:
            cells, length, t_half, coef = self.bface[side]
            c = bc.sides[side]
            gn = _gravity_normal(gravity, side) * np.ones(cells.size)
            kind = self.kinds[side]
            contrib = np.where(kind == NEUMANN, -c.value * length, 0.0)
            dir_ = kind == DIRICHLET
            contrib[dir_] = length * (t_half[dir_] * c.value[dir_] - gn[dir_])
            rob = kind == ROBIN
            contrib[rob] = length * (coef[rob] * c.value[rob] - gn[rob] / (1.0 + t_half[rob] * self.betas[side][rob]))
            np.add.at(b, cells, contrib)
        return b

    def solve_rhs(self, b: np.ndarray) -> np.ndarray:
        """Solve for cell pressures; ``b`` may hold several right-hand sides as columns."""
        lu = self._factor()
        if self.anchored:
            return lu.solve(b)
        total = b.sum(axis=0)
        scale = np.abs(b).sum(axis=0) + 1e-300
        if np.any(np.abs(total) > 1e-10 * scale):
            raise CompatibilityError(
                f"all-Neumann problem with net source {np.max(np.abs(total)):.3e} (must be zero)")
        extra = np.zeros((1,) + b.shape[1:])
        sol = lu.solve(np.concatenate([b, extra], axis=0))
        return sol[:-1]

    def velocities(self, p: np.ndarray, bc: BoundarySpec, gravity: FaceField | None = None) -> FaceField:
        g = self.grid
        P = p.reshape(g.shape)
        u = FaceField.zeros(g)
        u.ux[:, 1:-1] = self.tx * (P[:, :-1] - P[:, 1:]) / g.dy
        u.uy[1:-1, :] = self.ty * (P[:-1, :] - P[1:, :]) / g.dx
        if gravity is not None:
            u.ux[:, 1:-1] += gravity.ux[:, 1:-1]
            u.uy[1:-1, :] += gravity.uy[1:-1, :]
        for side in SIDES:
            cells, length, t_half, coef = self.bface[side]
            c = bc.sides[side]
            kind = self.kinds[side]
            pc = p[cells]
            gn = _gravity_normal(gravity, side) * np.ones(cells.size)
            un = np.where(kind == NEUMANN, c.value, 0.0)
            dir_ = kind == DIRICHLET
            un[dir_] = t_half[dir_] * (pc[dir_] - c.value[dir_]) + gn[dir_]
            rob = kind == ROBIN
            un[rob] = (t_half[rob] * (pc[rob] - c.value[rob]) + gn[rob]) / (1.0 + t_half[rob] * self.betas[side][rob])
            if side == "left":
                u.ux[:, 0] = -un
            elif side == "right":
                u.ux[:, -1] = un
            elif side == "bottom":
                u.uy[0, :] = -un
            else:
                u.uy[-1, :] = un
        return u

    def solve(self, bc: BoundarySpec, q=0.0, gravity: FaceField | None = None) -> EllipticSolution:
        b = self.rhs(bc, q, gravity)
        p = self.solve_rhs(b)
        r = self.matrix @ p - b
        if not self.anchored:
            r = r - r.mean()
        res = float(np.linalg.norm(r) / max(np.linalg.norm(b), 1e-300))
        return EllipticSolution(p.reshape(self.grid.shape), self.velocities(p, bc, gravity), res)


def solve_darcy(grid: CartesianGrid, kappa, bc: BoundarySpec, q=0.0,
                gravity: FaceField | None = None) -> EllipticSolution:
    """Solve the pressure/velocity system on ``grid``.

    Pure Neumann problems are gauged to zero mean pressure and must satisfy
    ``sum(q V) == net Neumann outflow`` (plus gravity, which is divergence
    free in the interior) or :class:`CompatibilityError` is raised.
    """
    return TPFASystem(grid, kappa, bc).solve(bc, q, gravity)


def conservation_defect(sol: EllipticSolution, q=0.0) -> float:
    """Max cellwise ``|div u - q|`` relative to ``max |u|``."""
    q = as_cell_field(sol.u.grid, q)
    return float(np.abs(divergence(sol.u) - q).max() / max(sol.u.max_abs(), 1e-300))
