"""Sequential implicit (SI) and sequential fully implicit (SFI) time loops.

Each step freezes the Darcy velocity from the previous pressure solve, solves
the implicit transport problem with a Newton strategy, and then updates the
pressure/velocity at the new saturation. SFI repeats the pair of solves until
the saturation stops changing.

Time is measured in pore volumes injected: the velocity handed to transport
is rescaled by ``|Omega| / Q_in`` where ``Q_in`` is the current total
injection rate (boundary inflow plus injecting wells), so that one unit of
time injects one pore volume. Porosity is scaled out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .darcy import BoundarySpec, NEUMANN, solve_darcy
from .mesh import CartesianGrid, FaceField, as_cell_field
from .mrcm import InterfaceSpace, RobinParamField, assemble_and_solve_mrcm, downscale_stitch
from .newton import NewtonConfig, SolveReport, gravity_kinks, newton_solve
from .rock_fluids import FluidProps, mobilities
from .transport import (GravityData, SaturationState, TransportProblem, cfl_dt, darcy_gravity_offset,
                        explicit_step)

SFI_DEFAULT_CAP = 50


class StepFailure(RuntimeError):
    """A time step could not be completed; carries the Newton report and the partial ledger."""

    def __init__(self, message, report: SolveReport | None = None, ledger=None):
        super().__init__(message)
        self.report = report
        self.ledger = ledger or []


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WellModel:
    """Point sources ``((i, j), rate)``; rate is volume per unit time, positive for injection."""

    wells: tuple = ()
    s_inj: float = 1.0

    def source(self, grid: CartesianGrid) -> np.ndarray:
        q = grid.zeros()
        for (i, j), rate in self.wells:
            if not (0 <= i < grid.nx and 0 <= j < grid.ny):
                raise ValueError(f"well cell {(i, j)} lies outside the {grid.nx}x{grid.ny} grid")
            q[j, i] += rate / grid.cell_volume
        return q

    @property
    def injection_rate(self) -> float:
        return float(sum(r for _, r in self.wells if r > 0))


@dataclass
class FlowProblem:
    grid: CartesianGrid
    K: np.ndarray
    props: FluidProps
    bc: BoundarySpec
    s0: np.ndarray | float = 0.0
    wells: WellModel = field(default_factory=WellModel)
    s_inj: float = 1.0
    g: float = 0.0
    gravity_direction: int = -1

    def __post_init__(self):
        self.K = as_cell_field(self.grid, self.K)
        if np.any(self.K <= 0):
            raise ValueError("permeability must be positive")
        self.s0 = as_cell_field(self.grid, self.s0)
        self.q = self.wells.source(self.grid)

    @property
    def has_gravity(self) -> bool:
        return self.g > 0 and self.props.rho_w != self.props.rho_o

    def gravity(self, scale: float = 1.0) -> GravityData | None:
        if not self.has_gravity:
            return None
        return GravityData(self.g, self.K * scale, self.gravity_direction)

    def kappa(self, s) -> np.ndarray:
        return mobilities(s, self.props)[2] * self.K

    def darcy_gravity(self, s) -> FaceField | None:
        if self.g == 0:
            return None
        return darcy_gravity_offset(self.grid, s, self.props, GravityData(self.g, self.K, self.gravity_direction))


def injection_rate(problem: FlowProblem, u: FaceField) -> float:
    """Total inflow: boundary faces with inward flux plus injecting wells."""
    g = problem.grid
    inflow = (np.maximum(u.ux[:, 0], 0).sum() - np.minimum(u.ux[:, -1], 0).sum()) * g.dy \
        + (np.maximum(u.uy[0, :], 0).sum() - np.minimum(u.uy[-1, :], 0).sum()) * g.dx
    return float(inflow + problem.wells.injection_rate)


def pvi_scale(problem: FlowProblem, u: FaceField) -> float:
    """Factor turning the Darcy time scale into PVI (1 when nothing is injected)."""
    Q = injection_rate(problem, u)
    return problem.grid.area / Q if Q > 0 else 1.0


# ---------------------------------------------------------------------------
# Velocity backends
# ---------------------------------------------------------------------------

class FineBackend:
    name = "fine"

    def solve(self, problem: FlowProblem, s) -> tuple[np.ndarray, FaceField]:
        sol = solve_darcy(problem.grid, problem.kappa(s), problem.bc, problem.q, problem.darcy_gravity(s))
        return sol.p, sol.u


class MRCMBackend:
    """Multiscale velocity; returns the stitched conservative field."""

    name = "mrcm"

    def __init__(self, decomp, spaces: InterfaceSpace, alpha: RobinParamField, map_fn: Callable = map):
        self.decomp = decomp
        self.spaces = spaces
        self.alpha = alpha
        self.map_fn = map_fn
        self.last_result = None

    def solve(self, problem: FlowProblem, s) -> tuple[np.ndarray, FaceField]:
        kappa = problem.kappa(s)
        grav = problem.darcy_gravity(s)
        res = assemble_and_solve_mrcm(self.decomp, kappa, problem.bc, problem.q, self.spaces,
                                      self.alpha, grav, self.map_fn)
        self.last_result = res
        u = downscale_stitch(res, kappa, problem.bc, problem.q, grav, self.map_fn)
        return res.pressure(), u


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SIConfig:
    dt: float
    T: float
    newton: NewtonConfig = field(default_factory=lambda: NewtonConfig("inflection", M=10.0))
    backend: str = "fine"
    gravity: bool = True
    transport: str = "implicit"      # or "explicit" (operator-splitting baseline)
    update_velocity: bool = True     # False: velocity frozen at its initial value

    def __post_init__(self):
        if not (0 < self.dt <= self.T * (1 + 1e-12)):
            raise ValueError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")
        if self.transport not in ("implicit", "explicit"):
            raise ValueError(f"unknown transport scheme {self.transport!r}")

    @property
    def nsteps(self) -> int:
        n = round(self.T / self.dt)
        if abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        return n


@dataclass(frozen=True)
class SFIConfig:
    si: SIConfig
    outer_tol: float = 1e-4
    outer_cap: int = SFI_DEFAULT_CAP

    def __post_init__(self):
        if not self.outer_tol > 0:
            raise ValueError("outer tolerance must be positive")
        if self.outer_cap < 1:
            raise ValueError("outer iteration cap must be at least 1")


@dataclass
class StepResult:
    s: np.ndarray
    p: np.ndarray
    u: FaceField
    newton_iterations: list
    reports: list
    outer_iterations: int = 1
    outer_converged: bool = True
    outer_changes: list = field(default_factory=list)


def _newton_for(problem: FlowProblem, cfg: NewtonConfig) -> NewtonConfig:
    kinks = cfg.kinks
    if problem.has_gravity and not kinks:
        kinks = gravity_kinks(problem.props)
    return replace(cfg, M=problem.props.M, kinks=tuple(kinks))


def transport_problem(problem: FlowProblem, s_prev, dt: float, u: FaceField, use_gravity: bool = True):
    """Implicit transport problem in PVI time for the frozen Darcy velocity ``u``."""
    c = pvi_scale(problem, u)
    grav = problem.gravity(c) if use_gravity else None
    return TransportProblem(problem.grid, s_prev, dt, u.scaled(c), problem.props, problem.s_inj,
                            problem.q * c, grav)


def _transport_solve(problem, s_prev, s_guess, dt, u, cfg: SIConfig, ncfg: NewtonConfig):
    tp = transport_problem(problem, s_prev, dt, u, cfg.gravity)
    before = u.checksum()
    s, rep = newton_solve(tp.residual, tp.jacobian, s_guess, ncfg)
    if u.checksum() != before:
        raise AssertionError("velocity changed during the Newton loop")
    return s, rep


def si_step(problem: FlowProblem, s_n, u_n: FaceField, cfg: SIConfig, backend,
            newton_cfg: NewtonConfig | None = None) -> StepResult:
    ncfg = newton_cfg or _newton_for(problem, cfg.newton)
    s, rep = _transport_solve(problem, s_n, s_n, cfg.dt, u_n, cfg, ncfg)
    if not rep.converged:
        raise StepFailure(f"Newton ({rep.strategy}) did not converge: {rep.message}", rep)
    if cfg.update_velocity:
        p, u = backend.solve(problem, s)
    else:
        p, u = None, u_n
    return StepResult(s, p, u, [rep.iterations], [rep])


def sfi_step(problem: FlowProblem, s_n, u_n: FaceField, cfg: SFIConfig, backend,
             newton_cfg: NewtonConfig | None = None) -> StepResult:
    si = cfg.si
    ncfg = newton_cfg or _newton_for(problem, si.newton)
    res = si_step(problem, s_n, u_n, si, backend, ncfg)
    res.outer_converged = cfg.outer_cap == 1
    for k in range(2, cfg.outer_cap + 1):
        s, rep = _transport_solve(problem, s_n, res.s, si.dt, res.u, si, ncfg)
        res.reports.append(rep)
        res.newton_iterations.append(rep.iterations)
        if not rep.converged:
            raise StepFailure(f"Newton ({rep.strategy}) did not converge in outer iteration {k}: "
                              f"{rep.message}", rep)
        change = float(np.max(np.abs(s - res.s)))
        res.outer_changes.append(change)
        res.s = s
        res.p, res.u = backend.solve(problem, s)
        res.outer_iterations = k
        if change <= cfg.outer_tol:
            res.outer_converged = True
            break
    return res


# ---------------------------------------------------------------------------
# Time loop
# ---------------------------------------------------------------------------

@dataclass
class LedgerRow:
    step: int
    time: float
    newton_iterations: int
    outer_iterations: int
    per_outer: tuple
    outer_converged: bool
    final_step_norm: float


@dataclass
class RunResult:
    times: list
    snapshots: list
    s: np.ndarray
    p: np.ndarray | None
    u: FaceField
    ledger: list
    velocities: list = field(default_factory=list)

    @property
    def total_newton(self) -> int:
        return int(sum(r.newton_iterations for r in self.ledger))

    @property
    def mean_newton(self) -> float:
        return self.total_newton / max(len(self.ledger), 1)


def make_backend(name: str, **kw):
    if name == "fine":
        return FineBackend()
    if name == "mrcm":
        return MRCMBackend(kw["decomp"], kw["spaces"], kw["alpha"], kw.get("map_fn", map))
    raise ValueError(f"unknown velocity backend {name!r}")


def run(problem: FlowProblem, config: SIConfig | SFIConfig, backend, snapshot_times=(),
        keep_velocities: bool = False, u0: FaceField | None = None) -> RunResult:
    """March to ``T`` with fixed ``dt``; snapshots are taken at the requested PVI times."""
    si = config.si if isinstance(config, SFIConfig) else config
    n = si.nsteps
    s = problem.s0.copy()
    if u0 is None:
        p, u = backend.solve(problem, s)
    else:
        p, u = None, u0
    ncfg = _newton_for(problem, si.newton)
    want = sorted(float(t) for t in snapshot_times)
    times, snaps, vels, ledger = [], [], [], []

    def take(t):
        while want and want[0] <= t + 1e-9 * max(si.dt, 1.0):
            times.append(want.pop(0))
            snaps.append(s.copy())

    take(0.0)
    for k in range(1, n + 1):
        t = k * si.dt
        try:
            if si.transport == "explicit":
                c = pvi_scale(problem, u)
                st = explicit_step(SaturationState(s), si.dt, u.scaled(c), problem.props,
                                   problem.gravity(c) if si.gravity else None, problem.s_inj, problem.q * c)
                s_new = st.s
                if si.update_velocity:
                    p, u = backend.solve(problem, s_new)
                row = LedgerRow(k, t, 0, 1, (0,), True, float("nan"))
            elif isinstance(config, SFIConfig):
                res = sfi_step(problem, s, u, config, backend, ncfg)
                s_new, p, u = res.s, res.p if res.p is not None else p, res.u
                row = LedgerRow(k, t, int(sum(res.newton_iterations)), res.outer_iterations,
                                tuple(res.newton_iterations), res.outer_converged,
                                res.reports[-1].step_norms[-1] if res.reports[-1].step_norms else 0.0)
            else:
                res = si_step(problem, s, u, si, backend, ncfg)
                s_new, u = res.s, res.u
                if res.p is not None:
                    p = res.p
                row = LedgerRow(k, t, res.newton_iterations[0], 1, tuple(res.newton_iterations), True,
                                res.reports[0].step_norms[-1] if res.reports[0].step_norms else 0.0)
        except StepFailure as exc:
            exc.ledger = ledger
            raise
        s = s_new
        ledger.append(row)
        if keep_velocities:
            vels.append(u)
        take(t)
    return RunResult(times, snaps, s, p, u, ledger, vels)


def cfl_for(problem: FlowProblem, backend=None, s=None, use_gravity: bool = True) -> float:
    """CFL step (PVI) for the velocity at saturation ``s`` (default: initial state)."""
    backend = backend or FineBackend()
    s = problem.s0 if s is None else s
    _, u = backend.solve(problem, s)
    c = pvi_scale(problem, u)
    return cfl_dt(u.scaled(c), problem.props, problem.gravity(c) if use_gravity else None, problem.q * c)


# ---------------------------------------------------------------------------
# Dimensionless form
# ---------------------------------------------------------------------------

MILLIDARCY = 9.869233e-16      # m^2
CENTIPOISE = 1e-3              # Pa s
YEAR = 365.25 * 24 * 3600.0    # s


@dataclass(frozen=True)
class DimensionlessScales:
    """Reference quantities; ``p_ref`` and ``g_ref`` follow from the others."""

    L: float
    u_ref: float
    K_max: float
    mu_w: float
    rho_w: float

    def __post_init__(self):
        for name in ("L", "u_ref", "K_max", "mu_w", "rho_w"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"scale {name} must be positive and finite, got {v}")

    @property
    def p_ref(self) -> float:
        return self.L * self.mu_w * self.u_ref / self.K_max

    @property
    def g_ref(self) -> float:
        return self.mu_w * self.u_ref / (self.rho_w * self.K_max)

    @property
    def t_ref(self) -> float:
        return self.L / self.u_ref


@dataclass
class PhysicalModel:
    """Field data of a flow problem in consistent units (dimensional or starred)."""

    dx: float
    dy: float
    K: np.ndarray
    mu_w: float
    mu_o: float
    rho_w: float
    rho_o: float
    g: float = 0.0
    q: np.ndarray | float = 0.0
    p: np.ndarray | float = 0.0
    u: np.ndarray | float = 0.0
    t: float = 0.0
    origin: tuple = (0.0, 0.0)

    @property
    def props(self) -> FluidProps:
        return FluidProps(self.mu_w, self.mu_o, self.rho_w, self.rho_o)


def _factors(sc: DimensionlessScales) -> dict:
    return dict(dx=sc.L, dy=sc.L, K=sc.K_max, mu_w=sc.mu_w, mu_o=sc.mu_w, rho_w=sc.rho_w, rho_o=sc.rho_w,
                g=sc.g_ref, q=sc.u_ref / sc.L, p=sc.p_ref, u=sc.u_ref, t=sc.t_ref)


def nondimensionalize(model: PhysicalModel, scales: DimensionlessScales) -> PhysicalModel:
    """Starred quantities: lengths over L, K over K_max, viscosities over mu_w, densities over rho_w, ...

    With the viscosities and densities divided by the water values, the
    starred mobilities are ``mu_w lambda`` and ``lambda_g mu_w / rho_w``, and
    the transport buoyancy term carries ``(rho_w - rho_o) / rho_w``.
    """
    f = _factors(scales)
    kw = {k: (np.asarray(getattr(model, k), dtype=float) / v if isinstance(getattr(model, k), np.ndarray)
              else getattr(model, k) / v) for k, v in f.items()}
    kw["origin"] = tuple(o / scales.L for o in model.origin)
    return PhysicalModel(**kw)


def redimensionalize(model: PhysicalModel, scales: DimensionlessScales) -> PhysicalModel:
    f = _factors(scales)
    kw = {k: (np.asarray(getattr(model, k), dtype=float) * v if isinstance(getattr(model, k), np.ndarray)
              else getattr(model, k) * v) for k, v in f.items()}
    kw["origin"] = tuple(o * scales.L for o in model.origin)
    return PhysicalModel(**kw)


def quarter_five_spot_scales(K_max_md: float, L: float = 182.88, mu_w_cp: float = 0.3,
                             rho_w: float = 1000.0, rate_pvi_per_year: float = 0.2) -> DimensionlessScales:
    """SI scales for the gravity five-spot: ``u_ref`` injects ``rate`` pore volumes per year."""
    u_ref = rate_pvi_per_year * L / YEAR
    return DimensionlessScales(L, u_ref, K_max_md * MILLIDARCY, mu_w_cp * CENTIPOISE, rho_w)


def boundary_inflow_bc(grid: CartesianGrid, rate: float = 1.0) -> BoundarySpec:
    """Left-to-right slab: uniform inflow ``rate`` on the left, ``p = 0`` on the right, no flow elsewhere."""
    return BoundarySpec(grid).set_neumann("left", -rate / grid.ly).set_dirichlet("right", 0.0)


def pressure_drop_bc(grid: CartesianGrid, p_left: float = 0.0, p_right: float = -1e4) -> BoundarySpec:
    return BoundarySpec(grid).set_dirichlet("left", p_left).set_dirichlet("right", p_right)


def all_neumann(bc: BoundarySpec) -> bool:
    return all(np.all(c.kind == NEUMANN) for c in bc.sides.values())
