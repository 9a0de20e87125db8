"""Multiscale Robin coupled method on a block decomposition.

Every subdomain solves a local Darcy problem with Robin data on the skeleton,

    -beta_i (u_i . n_i) + p_i = P_H - beta_i U_H (n . n_i),

where ``n`` is the fixed interface normal (+x/+y) and ``beta_i = alpha H / kappa_i``.
The interface unknowns ``U_H``/``P_H`` live in user-chosen spaces of
piecewise-constant edge functions; they are fixed by requiring the flux jump
to vanish weakly against the pressure space and the Robin-weighted flux
mismatch to vanish weakly against the flux space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .darcy import (DIRICHLET, NEUMANN, ROBIN, SIDES, BoundarySpec, CompatibilityError,
                    EllipticSolution, TPFASystem, face_transmissibility)
from .mesh import FaceField, Interface, SkeletonDecomposition, Subdomain, as_cell_field


class InterfaceRankError(np.linalg.LinAlgError):
    pass


class StructureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Interface spaces
# ---------------------------------------------------------------------------

@dataclass
class InterfaceSpace:
    """Basis vectors per interface for the flux (``flux``) and pressure (``pressure``) roles.

    Each entry is an ``(nedges, ndof)`` array whose columns are
    piecewise-constant functions on that interface's fine edges.
    """

    flux: list[np.ndarray]
    pressure: list[np.ndarray]

    def __post_init__(self):
        if len(self.flux) != len(self.pressure):
            raise ValueError("flux and pressure spaces must cover the same interfaces")
        for k, (phi, psi) in enumerate(zip(self.flux, self.pressure)):
            if phi.ndim != 2 or psi.ndim != 2 or phi.shape[1] == 0 or psi.shape[1] == 0:
                raise ValueError(f"interface {k} has an empty space")

    @property
    def n_flux(self) -> int:
        return sum(b.shape[1] for b in self.flux)

    @property
    def n_pressure(self) -> int:
        return sum(b.shape[1] for b in self.pressure)

    @property
    def ndof(self) -> int:
        return self.n_flux + self.n_pressure


def polynomial_basis(interface: Interface, degree: int) -> np.ndarray:
    if degree not in (0, 1):
        raise ValueError(f"unsupported interface polynomial degree {degree}")
    n = interface.nedges
    cols = [np.ones(n)]
    if degree == 1 and n > 1:
        t = interface.midpoints()
        lin = t - t.mean()                      # Gram-Schmidt against the constant
        cols.append(lin / np.abs(lin).max())
    return np.column_stack(cols)


def build_polynomial_space(decomp: SkeletonDecomposition, degree: int) -> InterfaceSpace:
    bases = [polynomial_basis(itf, degree) for itf in decomp.interfaces]
    return InterfaceSpace(flux=[b.copy() for b in bases], pressure=bases)


def full_trace_space(decomp: SkeletonDecomposition) -> InterfaceSpace:
    """One indicator per fine edge for both roles (the full trace space)."""
    eye = [np.eye(itf.nedges) for itf in decomp.interfaces]
    return InterfaceSpace(flux=[e.copy() for e in eye], pressure=eye)


@dataclass(frozen=True)
class ChannelMap:
    """Detected structures on one interface as half-open fine-edge index ranges."""

    interface: int
    nedges: int
    high: tuple[tuple[int, int], ...] = ()
    low: tuple[tuple[int, int], ...] = ()

    @property
    def n_high(self) -> int:
        return len(self.high)

    @property
    def n_low(self) -> int:
        return len(self.low)

    def high_mask(self) -> np.ndarray:
        m = np.zeros(self.nedges, dtype=bool)
        for i0, i1 in self.high:
            m[i0:i1] = True
        return m


def _runs(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return tuple((int(a), int(b)) for a, b in zip(edges[::2], edges[1::2]))


def edge_harmonic_perm(perm, interface: Interface) -> np.ndarray:
    lo, hi = interface.cell_pairs()
    K = np.asarray(perm)
    return face_transmissibility(K[lo], K[hi], 1.0, 1.0)


def detect_structures(perm, interface: Interface, hi_factor: float = 10.0,
                      lo_factor: float = 10.0) -> ChannelMap:
    """Classify interface edges against the geometric mean of the adjacent permeabilities.

    An edge is high-permeability when the harmonic mean of its two cells
    exceeds ``hi_factor`` times the geometric mean of ``K`` over the cells on
    both sides of the interface, and low-permeability when it falls below that
    geometric mean divided by ``lo_factor``.
    """
    if not (hi_factor > 1 and lo_factor > 1):
        raise ValueError("detection factors must exceed 1")
    lo, hi = interface.cell_pairs()
    K = np.asarray(perm)
    gmean = float(np.exp(np.mean(np.log(np.concatenate([K[lo], K[hi]])))))
    h = edge_harmonic_perm(K, interface)
    return ChannelMap(interface.index, interface.nedges,
                      _runs(h > hi_factor * gmean), _runs(h < gmean / lo_factor))


def _check_supports(supports, nedges):
    prev = 0
    for i0, i1 in supports:
        if not (0 <= i0 < i1 <= nedges) or i0 < prev:
            raise StructureError(f"supports {supports} overlap or leave [0, {nedges}]")
        prev = i1


def build_physics_pressure_space(interface: Interface, channel_map: ChannelMap) -> np.ndarray:
    """Hat functions following the high-permeability channels, sampled at edge midpoints.

    Returns ``2 + N_high`` columns (ramps that degenerate to zero because a
    channel touches an interface end are dropped).
    """
    _check_supports(channel_map.high, interface.nedges)
    x = interface.midpoints()
    a, b, h = interface.a, interface.b, interface.edge_length
    sup = [(a + i0 * h, a + i1 * h) for i0, i1 in channel_map.high]
    n = len(sup)
    starts = [s for s, _ in sup] + [b]          # a_1..a_N, a_{N+1}=b
    ends = [a] + [e for _, e in sup]            # b_0=a, b_1..b_N
    cols = []
    a1 = starts[0]
    cols.append(np.where((x > a) & (x < a1), (a1 - x) / max(a1 - a, 1e-300), 0.0))
    for k in range(1, n + 1):
        ak, bk = sup[k - 1]
        prev_end, next_start = ends[k - 1], starts[k]
        col = np.zeros_like(x)
        up = (x > prev_end) & (x < ak)
        col[up] = (x[up] - prev_end) / (ak - prev_end)
        col[(x > ak) & (x < bk)] = 1.0
        down = (x > bk) & (x < next_start)
        col[down] = (next_start - x[down]) / (next_start - bk)
        cols.append(col)
    bn = ends[-1]
    cols.append(np.where((x > bn) & (x < b), (x - bn) / max(b - bn, 1e-300), 0.0))
    basis = np.column_stack(cols)
    return basis[:, np.abs(basis).max(axis=0) > 0]


def build_physics_flux_space(interface: Interface, channel_map: ChannelMap) -> np.ndarray:
    """Indicators of the barrier supports and the gaps between them (``1 + 2 N_low`` columns)."""
    _check_supports(channel_map.low, interface.nedges)
    n = interface.nedges
    cuts = [0]
    for i0, i1 in channel_map.low:
        cuts += [i0, i1]
    cuts.append(n)
    cols = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        col = np.zeros(n)
        col[lo:hi] = 1.0
        cols.append(col)
    basis = np.column_stack(cols)
    return basis[:, basis.sum(axis=0) > 0]


def physics_space(decomp: SkeletonDecomposition, channel_maps: Sequence[ChannelMap],
                  pressure: bool = True, flux: bool = True) -> InterfaceSpace:
    """Physics-based spaces where structures were detected, linear polynomials elsewhere."""
    P, U = [], []
    for itf, cmap in zip(decomp.interfaces, channel_maps):
        lin = polynomial_basis(itf, 1)
        P.append(build_physics_pressure_space(itf, cmap) if pressure and cmap.n_high else lin)
        U.append(build_physics_flux_space(itf, cmap) if flux and cmap.n_low else lin.copy())
    return InterfaceSpace(flux=U, pressure=P)


# ---------------------------------------------------------------------------
# Robin parameter
# ---------------------------------------------------------------------------

@dataclass
class RobinParamField:
    """Dimensionless ``alpha`` per fine edge of each interface."""

    alpha: list[np.ndarray]

    def __post_init__(self):
        for a in self.alpha:
            if np.any(~(np.asarray(a) > 0)):
                raise ValueError("alpha must be positive")

    @classmethod
    def uniform(cls, decomp: SkeletonDecomposition, value: float = 1.0) -> "RobinParamField":
        return cls([np.full(itf.nedges, float(value)) for itf in decomp.interfaces])

    def beta(self, decomp: SkeletonDecomposition, kappa) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(beta_lower, beta_upper)`` per interface, ``beta = alpha H / kappa_adjacent``."""
        k = np.asarray(kappa)
        out = []
        for itf, a in zip(decomp.interfaces, self.alpha):
            lo, hi = itf.cell_pairs()
            out.append((a * itf.H / k[lo], a * itf.H / k[hi]))
        return out


def adaptive_alpha(decomp: SkeletonDecomposition, channel_maps: Sequence[ChannelMap],
                   alpha_low: float = 1e-2, alpha_high: float = 1e2) -> RobinParamField:
    if not (alpha_low > 0 and alpha_high > 0):
        raise ValueError("alpha values must be positive")
    alpha = []
    for itf, cmap in zip(decomp.interfaces, channel_maps):
        a = np.full(itf.nedges, float(alpha_high))
        a[cmap.high_mask()] = alpha_low
        alpha.append(a)
    return RobinParamField(alpha)


# ---------------------------------------------------------------------------
# Local problems
# ---------------------------------------------------------------------------

def _restrict_faces(u: FaceField | None, sub: Subdomain, grid) -> FaceField | None:
    if u is None:
        return None
    return FaceField(grid, u.ux[sub.jslice, sub.i0:sub.i0 + sub.nx + 1].copy(),
                     u.uy[sub.j0:sub.j0 + sub.ny + 1, sub.islice].copy())


def _outer_bc(bc: BoundarySpec, sub: Subdomain, decomp: SkeletonDecomposition, local_grid) -> BoundarySpec:
    """Local BoundarySpec carrying the global conditions on the subdomain's outer edges."""
    out = BoundarySpec(local_grid)
    g = decomp.grid
    if sub.i0 == 0:
        out.sides["left"] = _slice_side(bc.sides["left"], sub.jslice)
    if sub.i0 + sub.nx == g.nx:
        out.sides["right"] = _slice_side(bc.sides["right"], sub.jslice)
    if sub.j0 == 0:
        out.sides["bottom"] = _slice_side(bc.sides["bottom"], sub.islice)
    if sub.j0 + sub.ny == g.ny:
        out.sides["top"] = _slice_side(bc.sides["top"], sub.islice)
    return out


def _slice_side(cond, sl):
    from .darcy import SideCondition
    return SideCondition(cond.kind[sl].copy(), cond.value[sl].copy(), cond.beta[sl].copy())


def _homogeneous(bc: BoundarySpec) -> BoundarySpec:
    h = bc.copy()
    for c in h.sides.values():
        c.value[:] = 0.0
    return h


def _robin_outflow(system: TPFASystem, side: str, p: np.ndarray, r: np.ndarray,
                   gn: np.ndarray | float = 0.0) -> np.ndarray:
    """Outward normal velocity on a Robin side for pressure columns ``p``."""
    cells, _, t_half, _ = system.bface[side]
    beta = system.betas[side]
    pc = p[cells]
    if pc.ndim == 2:
        t_half, beta = t_half[:, None], beta[:, None]
        if np.ndim(gn) == 1:
            gn = np.asarray(gn)[:, None]
    return (t_half * (pc - r) + gn) / (1.0 + t_half * beta)


@dataclass
class LocalBasis:
    """Local solves of one subdomain.

    ``dofs`` are global interface dof indices; ``traces[piece]`` holds the
    outward normal velocity on that piece's edges, column 0 for the particular
    solution and column ``1 + m`` for ``dofs[m]``.
    """

    sub: int
    dofs: np.ndarray
    traces: list[np.ndarray]
    system: TPFASystem = field(repr=False)
    pressures: np.ndarray = field(repr=False)

    @property
    def nsolves(self) -> int:
        return self.pressures.shape[1]


@dataclass
class MRCMResult:
    U: list[np.ndarray]              # U_H per interface, edge values
    P: list[np.ndarray]              # P_H per interface, edge values
    coefficients: np.ndarray
    local: list[EllipticSolution]
    one_sided: list[tuple[np.ndarray, np.ndarray]]   # along the fixed normal, lower / upper side
    flux_residual: float
    robin_residual: float
    basis_counts: list[int]
    decomp: SkeletonDecomposition = field(repr=False)

    def velocity(self) -> FaceField:
        """Global face field with skeleton edges set to the mean of the two one-sided values."""
        g = self.decomp.grid
        u = FaceField.zeros(g)
        for sub, sol in zip(self.decomp.subdomains, self.local):
            u.ux[sub.jslice, sub.i0:sub.i0 + sub.nx + 1] = sol.u.ux
            u.uy[sub.j0:sub.j0 + sub.ny + 1, sub.islice] = sol.u.uy
        for itf, (lo, hi) in zip(self.decomp.interfaces, self.one_sided):
            itf.put(u, 0.5 * (lo + hi))
        return u

    def pressure(self) -> np.ndarray:
        g = self.decomp.grid
        p = np.zeros(g.shape)
        for sub, sol in zip(self.decomp.subdomains, self.local):
            p[sub.jslice, sub.islice] = sol.p
        return p


class MRCMSolver:
    """Assemble and solve the interface system for one ``kappa`` field."""

    def __init__(self, decomp: SkeletonDecomposition, spaces: InterfaceSpace,
                 alpha: RobinParamField, map_fn: Callable = map):
        if len(spaces.flux) != len(decomp.interfaces):
            raise ValueError("interface space count does not match the decomposition")
        self.decomp = decomp
        self.spaces = spaces
        self.alpha = alpha
        self.map_fn = map_fn
        nU = [b.shape[1] for b in spaces.flux]
        nP = [b.shape[1] for b in spaces.pressure]
        self.u_off = np.concatenate([[0], np.cumsum(nU)]).astype(int)
        self.p_off = (spaces.n_flux + np.concatenate([[0], np.cumsum(nP)])).astype(int)
        self.ndof = spaces.ndof

    def u_dofs(self, k: int) -> np.ndarray:
        return np.arange(self.u_off[k], self.u_off[k + 1])

    def p_dofs(self, k: int) -> np.ndarray:
        return np.arange(self.p_off[k], self.p_off[k + 1])

    def _local_setup(self, sub: Subdomain, kappa, bc, betas):
        g = self.decomp.grid
        lg = g.subgrid(sub.i0, sub.j0, sub.nx, sub.ny)
        lbc = _outer_bc(bc, sub, self.decomp, lg)
        for piece in self.decomp.boundary[sub.index]:
            b_lo, b_hi = betas[piece.interface]
            beta = b_lo if piece.sign > 0 else b_hi
            lbc.set_robin(piece.side, beta, 0.0)
        return lg, lbc

    def local_basis(self, sub: Subdomain, kappa, bc, q, gravity, betas) -> tuple[LocalBasis, BoundarySpec]:
        lg, lbc = self._local_setup(sub, kappa, bc, betas)
        system = TPFASystem(lg, kappa[sub.jslice, sub.islice], lbc)
        lgrav = _restrict_faces(gravity, sub, lg)
        qloc = q[sub.jslice, sub.islice]
        hom = _homogeneous(lbc)
        pieces = self.decomp.boundary[sub.index]
        dofs = np.concatenate([np.concatenate([self.u_dofs(pc.interface), self.p_dofs(pc.interface)])
                               for pc in pieces]) if pieces else np.zeros(0, dtype=int)
        cols = [system.rhs(lbc, qloc, lgrav)]
        r_data = [[np.zeros(lbc.sides[pc.side].kind.size) for pc in pieces]]
        base_hom = system.rhs(hom, 0.0, None)
        for pi, pc in enumerate(pieces):
            k = pc.interface
            beta = system.betas[pc.side]
            for phi in self.spaces.flux[k].T:
                r = -beta * pc.sign * phi
                cols.append(self._robin_rhs(system, base_hom, pc.side, r))
                r_data.append([r if j == pi else 0.0 for j in range(len(pieces))])
            for psi in self.spaces.pressure[k].T:
                cols.append(self._robin_rhs(system, base_hom, pc.side, psi))
                r_data.append([psi if j == pi else 0.0 for j in range(len(pieces))])
        B = np.column_stack(cols)
        Pm = system.solve_rhs(B)
        if Pm.ndim == 1:
            Pm = Pm[:, None]
        traces = []
        lgn = None
        for pi, pc in enumerate(pieces):
            R = np.column_stack([np.broadcast_to(rd[pi], (lbc.sides[pc.side].kind.size,)) for rd in r_data])
            gn = _side_gravity(lgrav, pc.side)
            G = np.zeros(R.shape)
            if gn is not None:
                G[:, 0] = gn
            traces.append(_robin_outflow(system, pc.side, Pm, R, G))
        return LocalBasis(sub.index, dofs, traces, system, Pm), lbc

    @staticmethod
    def _robin_rhs(system: TPFASystem, base: np.ndarray, side: str, r: np.ndarray) -> np.ndarray:
        cells, length, t_half, coef = system.bface[side]
        b = base.copy()
        np.add.at(b, cells, length * coef * r)
        return b

    def solve(self, kappa, bc: BoundarySpec, q=0.0, gravity: FaceField | None = None) -> MRCMResult:
        d = self.decomp
        kappa = as_cell_field(d.grid, kappa)
        q = as_cell_field(d.grid, q)
        betas = self.alpha.beta(d, kappa)
        results = list(self.map_fn(lambda sub: self.local_basis(sub, kappa, bc, q, gravity, betas),
                                   d.subdomains))
        n = self.ndof
        A = np.zeros((n, n))
        rhs = np.zeros(n)
        for basis, _ in results:
            for piece, tr in zip(d.boundary[basis.sub], basis.traces):
                k = piece.interface
                itf = d.interfaces[k]
                L = itf.edge_length
                psi, phi = self.spaces.pressure[k], self.spaces.flux[k]
                rows_p, rows_u = self.p_dofs(k), self.u_dofs(k)
                beta = (betas[k][0] if piece.sign > 0 else betas[k][1])
                A[np.ix_(rows_p, basis.dofs)] += psi.T @ (L * tr[:, 1:])
                rhs[rows_p] -= psi.T @ (L * tr[:, 0])
                w = (beta * piece.sign * L)[:, None]
                A[np.ix_(rows_u, basis.dofs)] += phi.T @ (w * tr[:, 1:])
                rhs[rows_u] -= phi.T @ (w[:, 0] * tr[:, 0])
                A[np.ix_(rows_u, rows_u)] -= phi.T @ ((beta * L)[:, None] * phi)
        coef = self._solve_interface(A, rhs, bc)
        return self._reconstruct(coef, results, kappa, q, gravity, betas, A, rhs)

    def _solve_interface(self, A, rhs, bc):
        n = A.shape[0]
        if n == 0:
            return np.zeros(0)
        scale = np.abs(A).max(axis=1)
        scale[scale == 0] = 1.0
        As, bs = A / scale[:, None], rhs / scale
        if not bc.has_pressure_anchor():
            # pressure is defined up to a constant: pin the skeleton mean of P_H
            gauge = np.zeros(n)
            for k, itf in enumerate(self.decomp.interfaces):
                gauge[self.p_dofs(k)] = self.spaces.pressure[k].sum(axis=0) * itf.edge_length
            gauge /= np.abs(gauge).max()
            As = np.vstack([As, gauge])
            bs = np.concatenate([bs, [0.0]])
            coef, *_ = np.linalg.lstsq(As, bs, rcond=None)
        else:
            try:
                coef = np.linalg.solve(As, bs)
            except np.linalg.LinAlgError:
                raise InterfaceRankError(self._deficient(As)) from None
        if not np.all(np.isfinite(coef)):
            raise InterfaceRankError(self._deficient(As))
        return coef

    def _deficient(self, A) -> str:
        _, svals, vt = np.linalg.svd(A)
        null = np.abs(vt[-1])
        dof = int(np.argmax(null))
        k = int(np.searchsorted(self.u_off, dof, side="right") - 1) if dof < self.spaces.n_flux \
            else int(np.searchsorted(self.p_off, dof, side="right") - 1)
        role = "flux" if dof < self.spaces.n_flux else "pressure"
        return (f"singular interface system (sigma_min={svals[-1]:.2e}); "
                f"deficient {role} space on interface {k}")

    def _reconstruct(self, coef, results, kappa, q, gravity, betas, A, rhs) -> MRCMResult:
        d = self.decomp
        U = [self.spaces.flux[k] @ coef[self.u_dofs(k)] for k in range(len(d.interfaces))]
        P = [self.spaces.pressure[k] @ coef[self.p_dofs(k)] for k in range(len(d.interfaces))]
        local, counts = [], []
        one_sided = [[None, None] for _ in d.interfaces]
        for (basis, lbc), sub in zip(results, d.subdomains):
            counts.append(basis.nsolves)
            full = np.concatenate([[1.0], coef[basis.dofs]])
            p = basis.pressures @ full
            bc_sol = lbc.copy()
            for piece in d.boundary[sub.index]:
                k = piece.interface
                beta = basis.system.betas[piece.side]
                bc_sol.sides[piece.side].value[:] = P[k] - beta * piece.sign * U[k]
            lg = basis.system.grid
            u = basis.system.velocities(p, bc_sol, _restrict_faces(gravity, sub, lg))
            local.append(EllipticSolution(p.reshape(lg.shape), u, 0.0))
            for piece, tr in zip(d.boundary[sub.index], basis.traces):
                along = piece.sign * (tr @ full)
                one_sided[piece.interface][0 if piece.sign > 0 else 1] = along
        res = A @ coef - rhs
        nU = self.spaces.n_flux
        flux_scale = np.abs(A[nU:]).dot(np.abs(coef)) + np.abs(rhs[nU:])
        rob_scale = np.abs(A[:nU]).dot(np.abs(coef)) + np.abs(rhs[:nU])
        fr = float(np.max(np.abs(res[nU:])) / max(flux_scale.max(), 1e-300)) if res[nU:].size else 0.0
        rr = float(np.max(np.abs(res[:nU])) / max(rob_scale.max(), 1e-300)) if res[:nU].size else 0.0
        return MRCMResult(U, P, coef, local, [tuple(x) for x in one_sided], fr, rr, counts, d)


def _side_gravity(g: FaceField | None, side: str):
    if g is None:
        return None
    if side == "left":
        return -g.ux[:, 0]
    if side == "right":
        return g.ux[:, -1]
    if side == "bottom":
        return -g.uy[0, :]
    return g.uy[-1, :]


def assemble_and_solve_mrcm(decomp, kappa, bc, q, spaces, alpha, gravity=None, map_fn=map) -> MRCMResult:
    return MRCMSolver(decomp, spaces, alpha, map_fn).solve(kappa, bc, q, gravity)


def compatibility_residuals(result: MRCMResult, spaces: InterfaceSpace, alpha: RobinParamField,
                            kappa) -> tuple[float, float]:
    """Evaluate both weak continuity conditions directly from the one-sided traces."""
    d = result.decomp
    betas = alpha.beta(d, kappa)
    fr, rr, fs, rs = 0.0, 0.0, 0.0, 0.0
    for k, itf in enumerate(d.interfaces):
        lo, hi = result.one_sided[k]
        L = itf.edge_length
        jump = spaces.pressure[k].T @ ((lo - hi) * L)
        fr = max(fr, np.abs(jump).max())
        fs = max(fs, np.abs(spaces.pressure[k]).T.dot((np.abs(lo) + np.abs(hi)) * L).max())
        b_lo, b_hi = betas[k]
        U = result.U[k]
        # lower side: n.n_i = +1, outward = lo; upper side: n.n_i = -1, outward = -hi
        terms = b_lo * (lo - U) + b_hi * (hi - U)
        rob = spaces.flux[k].T @ (terms * L)
        rr = max(rr, np.abs(rob).max())
        rs = max(rs, np.abs(spaces.flux[k]).T.dot((b_lo * (np.abs(lo) + np.abs(U))
                                                    + b_hi * (np.abs(hi) + np.abs(U))) * L).max())
    return fr / max(fs, 1e-300), rr / max(rs, 1e-300)


# ---------------------------------------------------------------------------
# Downscaling
# ---------------------------------------------------------------------------

def downscale_stitch(result: MRCMResult, kappa, bc: BoundarySpec, q=0.0,
                     gravity: FaceField | None = None, map_fn: Callable = map) -> FaceField:
    """Single-valued conservative velocity from the two-sided multiscale fluxes.

    Skeleton fluxes are replaced by the mean of the two one-sided values and
    each subdomain is re-solved with those Neumann data (outer conditions
    unchanged). Subdomains without a pressure anchor get any compatibility
    defect spread uniformly over their cells.
    """
    d = result.decomp
    g = d.grid
    kappa = as_cell_field(g, kappa)
    q = as_cell_field(g, q)
    stitched = [0.5 * (lo + hi) for lo, hi in result.one_sided]

    def resolve(sub):
        lg = g.subgrid(sub.i0, sub.j0, sub.nx, sub.ny)
        lbc = _outer_bc(bc, sub, d, lg)
        for piece in d.boundary[sub.index]:
            lbc.set_neumann(piece.side, piece.sign * stitched[piece.interface])
        qloc = q[sub.jslice, sub.islice].copy()
        if not lbc.has_pressure_anchor():
            defect = qloc.sum() * lg.cell_volume - lbc.neumann_outflow()
            qloc -= defect / lg.area
        lgrav = _restrict_faces(gravity, sub, lg)
        return TPFASystem(lg, kappa[sub.jslice, sub.islice], lbc).solve(lbc, qloc, lgrav)

    u = FaceField.zeros(g)
    for sub, sol in zip(d.subdomains, map_fn(resolve, d.subdomains)):
        u.ux[sub.jslice, sub.i0:sub.i0 + sub.nx + 1] = sol.u.ux
        u.uy[sub.j0:sub.j0 + sub.ny + 1, sub.islice] = sol.u.uy
    for itf, val in zip(d.interfaces, stitched):
        itf.put(u, val)
    return u
