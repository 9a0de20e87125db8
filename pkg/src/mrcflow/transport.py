"""First-order upwind saturation transport.

The implicit residual of one backward-Euler step is

    H(s) = s - s_prev + dt/V * (viscous + gravity flux balance) - dt * (water sources)

Viscous face fluxes are upwinded on the sign of the (frozen) total velocity;
gravity fluxes use implicit hybrid upwinding: water mobility from the cell the
heavier phase leaves, oil mobility from the other one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import CartesianGrid, FaceField, as_cell_field
from .rock_fluids import (FluidProps, _check_saturation, _frac_flow, fractional_flow,
                          max_df, mobilities, mobility_derivatives)


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class GravityData:
    """Buoyancy along y.

    The gravitational acceleration vector is ``g * direction * e_y``; with
    ``y`` pointing up, ``direction = -1`` is the physical setting.
    """

    g: float
    K: np.ndarray = field(repr=False)
    direction: int = -1

    def __post_init__(self):
        if self.direction not in (-1, 1):
            raise ValueError("gravity direction must be -1 or +1 along y")
        if self.g < 0:
            raise ValueError("gravity magnitude must be non-negative")

    @property
    def gy(self) -> float:
        return self.g * self.direction


@dataclass
class SaturationState:
    s: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.s = _check_saturation(self.s)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def viscous_fluxes(s, u: FaceField, props: FluidProps, s_inj: float = 1.0):
    """Upwind face fluxes ``(F, G)`` (volume per time through each face)."""
    g = u.grid
    f = fractional_flow(as_cell_field(g, s), props.M)[0]
    f_inj = fractional_flow(s_inj, props.M)[0]
    return _viscous(f, float(f_inj), u)


def _viscous(f, f_inj, u):
    g = u.grid
    fx = np.empty((g.ny, g.nx + 1))
    fx[:, 1:-1] = np.where(u.ux[:, 1:-1] > 0, f[:, :-1], f[:, 1:])
    fx[:, 0] = np.where(u.ux[:, 0] > 0, f_inj, f[:, 0])
    fx[:, -1] = np.where(u.ux[:, -1] > 0, f[:, -1], f_inj)
    fy = np.empty((g.ny + 1, g.nx))
    fy[1:-1, :] = np.where(u.uy[1:-1, :] > 0, f[:-1, :], f[1:, :])
    fy[0, :] = np.where(u.uy[0, :] > 0, f_inj, f[0, :])
    fy[-1, :] = np.where(u.uy[-1, :] > 0, f[-1, :], f_inj)
    return g.dy * fx * u.ux, g.dx * fy * u.uy


def _ihu_split(a, b):
    """``a b / (a + b)`` and its partial derivatives, zero where both vanish."""
    tot = a + b
    safe = np.where(tot > 0, tot, 1.0)
    h = np.where(tot > 0, a * b / safe, 0.0)
    ha = np.where(tot > 0, (b / safe) ** 2, 0.0)
    hb = np.where(tot > 0, (a / safe) ** 2, 0.0)
    return h, ha, hb


def _gravity_terms(s, props: FluidProps, grav: GravityData, grid: CartesianGrid):
    """Interior y-face gravity flux and derivatives w.r.t. the water/oil upwind cells.

    Returns ``(flux, d_flux_d_lower, d_flux_d_upper)`` of shape ``(ny-1, nx)``;
    flux is positive towards +y.
    """
    K = as_cell_field(grid, grav.K)
    drho = props.rho_w - props.rho_o
    coef = grid.dx * _harmonic(K[:-1, :], K[1:, :]) * drho * grav.gy
    lw, lo = mobilities(s, props)[:2]
    dlw, dlo = mobility_derivatives(s, props)
    lower, upper = slice(None, -1), slice(1, None)
    if drho * grav.gy > 0:      # water moves up: leaves the lower cell
        w, o = lower, upper
    else:
        w, o = upper, lower
    h, ha, hb = _ihu_split(lw[w, :], lo[o, :])
    flux = coef * h
    d_w = coef * ha * dlw[w, :]
    d_o = coef * hb * dlo[o, :]
    if w is lower:
        return flux, d_w, d_o
    return flux, d_o, d_w


def gravity_fluxes(s, props: FluidProps, gravity: GravityData, K=None):
    """IHU gravity flux on every y-face (boundary faces carry none)."""
    if K is not None:
        gravity = GravityData(gravity.g, K, gravity.direction)
    grid_like = np.asarray(gravity.K)
    ny, nx = grid_like.shape
    out = np.zeros((ny + 1, nx))
    if ny > 1:
        grid = CartesianGrid(nx, ny, 1.0, 1.0)
        s = as_cell_field(grid, s)
        out[1:-1, :] = _gravity_terms(s, props, gravity, grid)[0]
    return out


def gravity_fluxes_on(grid: CartesianGrid, s, props: FluidProps, gravity: GravityData) -> np.ndarray:
    out = np.zeros((grid.ny + 1, grid.nx))
    if grid.ny > 1:
        out[1:-1, :] = _gravity_terms(as_cell_field(grid, s), props, gravity, grid)[0]
    return out


def darcy_gravity_offset(grid: CartesianGrid, s, props: FluidProps, gravity: GravityData) -> FaceField:
    """Face velocity offset ``K lambda_g G`` entering the pressure equation."""
    K = as_cell_field(grid, gravity.K)
    lg = mobilities(as_cell_field(grid, s), props)[3]
    off = FaceField.zeros(grid)
    off.uy[1:-1, :] = _harmonic(K[:-1, :], K[1:, :]) * 0.5 * (lg[:-1, :] + lg[1:, :]) * gravity.gy
    off.uy[0, :] = K[0, :] * lg[0, :] * gravity.gy
    off.uy[-1, :] = K[-1, :] * lg[-1, :] * gravity.gy
    return off


@dataclass
class TransportProblem:
    """One implicit step: data frozen over the Newton loop.

    ``q`` is the volumetric source per unit volume (``div u = q``); positive
    entries inject fluid at saturation ``s_inj``, negative ones produce at the
    cell saturation.
    """

    grid: CartesianGrid
    s_prev: np.ndarray
    dt: float
    u: FaceField
    props: FluidProps
    s_inj: float = 1.0
    q: np.ndarray | float = 0.0
    gravity: GravityData | None = None

    def __post_init__(self):
        self.s_prev = as_cell_field(self.grid, self.s_prev)
        self.q = as_cell_field(self.grid, self.q)
        self._f_inj = float(fractional_flow(self.s_inj, self.props.M)[0])

    @property
    def n(self) -> int:
        return self.grid.ncells

    def flux_balance(self, s) -> np.ndarray:
        """Net outflow per cell (viscous + gravity), before the ``dt/V`` factor."""
        g = self.grid
        s = as_cell_field(g, s)
        f = fractional_flow(s, self.props.M)[0]
        F, G = _viscous(f, self._f_inj, self.u)
        bal = (F[:, 1:] - F[:, :-1]) + (G[1:, :] - G[:-1, :])
        if self.gravity is not None and g.ny > 1:
            gt = _gravity_terms(s, self.props, self.gravity, g)[0]
            bal[:-1, :] += gt
            bal[1:, :] -= gt
        return bal

    def water_source(self, s) -> np.ndarray:
        f = fractional_flow(as_cell_field(self.grid, s), self.props.M)[0]
        q = self.q
        return np.where(q > 0, q * self._f_inj, q * f)

    def residual(self, s) -> np.ndarray:
        g = self.grid
        s = as_cell_field(g, s)
        H = s - self.s_prev + (self.dt / g.cell_volume) * self.flux_balance(s) \
            - self.dt * self.water_source(s)
        return H.ravel()

    def jacobian(self, s) -> sp.csr_matrix:
        g = self.grid
        nx, ny, n = g.nx, g.ny, g.ncells
        s = as_cell_field(g, s)
        c = self.dt / g.cell_volume
        df = fractional_flow(s, self.props.M)[1]
        idx = np.arange(n).reshape(ny, nx)
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.ones(n)]
        u = self.u
        # interior x-faces
        ux = u.ux[:, 1:-1]
        L, R = idx[:, :-1], idx[:, 1:]
        up = np.where(ux > 0, L, R)
        dF = g.dy * np.where(ux > 0, df[:, :-1], df[:, 1:]) * ux
        rows += [L.ravel(), R.ravel()]
        cols += [up.ravel(), up.ravel()]
        vals += [c * dF.ravel(), -c * dF.ravel()]
        # interior y-faces
        uy = u.uy[1:-1, :]
        B, T = idx[:-1, :], idx[1:, :]
        up = np.where(uy > 0, B, T)
        dG = g.dx * np.where(uy > 0, df[:-1, :], df[1:, :]) * uy
        rows += [B.ravel(), T.ravel()]
        cols += [up.ravel(), up.ravel()]
        vals += [c * dG.ravel(), -c * dG.ravel()]
        # boundary outflow faces
        diag = np.zeros((ny, nx))
        diag[:, 0] += np.where(u.ux[:, 0] < 0, -g.dy * df[:, 0] * u.ux[:, 0], 0.0)
        diag[:, -1] += np.where(u.ux[:, -1] > 0, g.dy * df[:, -1] * u.ux[:, -1], 0.0)
        diag[0, :] += np.where(u.uy[0, :] < 0, -g.dx * df[0, :] * u.uy[0, :], 0.0)
        diag[-1, :] += np.where(u.uy[-1, :] > 0, g.dx * df[-1, :] * u.uy[-1, :], 0.0)
        diag = c * diag - self.dt * np.where(self.q < 0, self.q * df, 0.0)
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(diag.ravel())
        if self.gravity is not None and ny > 1:
            _, d_lo, d_hi = _gravity_terms(s, self.props, self.gravity, g)
            for src, dv in ((B, d_lo), (T, d_hi)):
                rows += [B.ravel(), T.ravel()]
                cols += [src.ravel(), src.ravel()]
                vals += [c * dv.ravel(), -c * dv.ravel()]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def boundary_net_flux(self, s) -> float:
        """Net outflow through the domain boundary (viscous part) for state ``s``."""
        f = fractional_flow(as_cell_field(self.grid, s), self.props.M)[0]
        F, G = _viscous(f, self._f_inj, self.u)
        return float(F[:, -1].sum() - F[:, 0].sum() + G[-1, :].sum() - G[0, :].sum())


def residual(state_prev: SaturationState, s_trial, dt, u: FaceField, props: FluidProps,
             gravity: GravityData | None = None, s_inj: float = 1.0, q=0.0) -> np.ndarray:
    prob = TransportProblem(u.grid, state_prev.s, dt, u, props, s_inj, q, gravity)
    return prob.residual(s_trial).reshape(u.grid.shape)


def jacobian(state_prev: SaturationState, s_trial, dt, u: FaceField, props: FluidProps,
             gravity: GravityData | None = None, s_inj: float = 1.0, q=0.0) -> sp.csr_matrix:
    return TransportProblem(u.grid, state_prev.s, dt, u, props, s_inj, q, gravity).jacobian(s_trial)


# ---------------------------------------------------------------------------
# CFL and explicit stepping
# ---------------------------------------------------------------------------

def cell_speed(u: FaceField, q=0.0) -> np.ndarray:
    """Per-cell transport speed used by the CFL estimate.

    The larger of the cell-centre velocity magnitude and the total outflow
    (faces plus sinks) expressed as a velocity through a face of the
    shorter cell side; the latter keeps the explicit update monotone.
    """
    g = u.grid
    out = (np.maximum(u.ux[:, 1:], 0) - np.minimum(u.ux[:, :-1], 0)) * g.dy \
        + (np.maximum(u.uy[1:, :], 0) - np.minimum(u.uy[:-1, :], 0)) * g.dx
    out = out - np.minimum(as_cell_field(g, q), 0.0) * g.cell_volume
    outflow_speed = out * min(g.dx, g.dy) / g.cell_volume
    return np.maximum(outflow_speed, np.hypot(*cell_center_velocity(u)))


def cell_center_velocity(u: FaceField) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (u.ux[:, 1:] + u.ux[:, :-1]), 0.5 * (u.uy[1:, :] + u.uy[:-1, :])


def gravity_speed_bound(props: FluidProps, gravity: GravityData) -> float:
    """``2 |(rho_w - rho_o) g / mu_o| max K``: the buoyancy part of the flux-derivative bound."""
    return 2.0 * abs((props.rho_w - props.rho_o) * gravity.g / props.mu_o) * float(np.max(gravity.K))


def _gravity_shape_derivative(s, M):
    """``f'(s)(1-s)^2 - 2 f(s)(1-s)``, i.e. ``mu_o d(f lambda_o)/ds``."""
    f, df, _ = _frac_flow(s, M)
    return df * (1 - s) ** 2 - 2 * f * (1 - s)


def sampled_max_flux_derivative(u: FaceField, props: FluidProps, gravity: GravityData | None = None,
                                samples: int = 2001) -> float:
    """``max |F'(s)|`` over cells and a dense saturation grid for ``F = f(u + K lambda_o drho G)``."""
    s = np.linspace(0.0, 1.0, samples)
    f, df, _ = _frac_flow(s, props.M)
    uxc, uyc = cell_center_velocity(u)
    best = 0.0
    K = None if gravity is None else as_cell_field(u.grid, gravity.K)
    gshape = None
    if gravity is not None:
        gshape = _gravity_shape_derivative(s, props.M) / props.mu_o * (props.rho_w - props.rho_o) * gravity.gy
    for j in range(u.grid.ny):
        fx = np.outer(uxc[j], df)
        fy = np.outer(uyc[j], df)
        if gravity is not None:
            fy = fy + np.outer(K[j], gshape)
        best = max(best, float(np.sqrt(fx ** 2 + fy ** 2).max()))
    return best


def flux_derivative_bound(u: FaceField, props: FluidProps, gravity: GravityData | None = None, q=0.0) -> float:
    """Analytic bound on ``max |F'(s)|``; the buoyancy term is the closed form valid for ``M <= 10``."""
    b = max_df(props.M) * float(cell_speed(u, q).max())
    if gravity is not None:
        b += gravity_speed_bound(props, gravity)
    return b


def cfl_dt(u: FaceField, props: FluidProps, gravity: GravityData | None = None, q=0.0) -> float:
    g = u.grid
    if gravity is None or gravity.g == 0 or props.rho_w == props.rho_o:
        speed = max_df(props.M) * float(cell_speed(u, q).max())
    elif props.M <= 10:
        speed = flux_derivative_bound(u, props, gravity, q)
    else:
        speed = max(sampled_max_flux_derivative(u, props, gravity),
                    max_df(props.M) * float(cell_speed(u, q).max()))
    if speed <= 0:
        return float("inf")
    return min(g.dx, g.dy) / speed


def explicit_step(state: SaturationState, dt: float, u: FaceField, props: FluidProps,
                  gravity: GravityData | None = None, s_inj: float = 1.0, q=0.0,
                  check_cfl: bool = True) -> SaturationState:
    if check_cfl:
        limit = cfl_dt(u, props, gravity, q)
        if dt > limit * (1 + 1e-12):
            raise CFLError(f"explicit step dt={dt:.3e} exceeds the CFL bound {limit:.3e}")
    prob = TransportProblem(u.grid, state.s, dt, u, props, s_inj, q, gravity)
    g = u.grid
    s_new = state.s - (dt / g.cell_volume) * prob.flux_balance(state.s) + dt * prob.water_source(state.s)
    return SaturationState(np.clip(s_new, 0.0, 1.0), state.time + dt)
