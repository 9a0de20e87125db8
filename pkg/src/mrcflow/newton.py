"""Newton solvers for the implicit transport system.

Five strategies share one driver:

* ``plain``        full Newton steps, no safeguards;
* ``under_relax``  every step scaled by a global factor, then clamped to [0, 1];
* ``inflection``   cellwise averaging whenever an update crosses the inflection
                   point of ``f`` (or a registered kink), then clamped;
* ``dogleg``       trust region on ``||H||^2`` mixing Cauchy and Newton steps;
* ``reflective``   trust region on a two-dimensional subspace with the
                   Gauss-Newton model and reflection at the bounds.

Convergence is declared when an accepted update satisfies ``||ds||_2 <= eta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .rock_fluids import _frac_flow

STRATEGIES = ("plain", "under_relax", "inflection", "dogleg", "reflective")


@dataclass(frozen=True)
class NewtonConfig:
    strategy: str = "inflection"
    eta: float = 1e-6
    max_iterations: int = 100
    relax: float = 0.5
    enforce_bounds: bool = True
    M: float | None = None          # viscosity ratio, needed by the inflection rule
    kinks: tuple = ()               # extra trust-region boundaries (gravity runs)
    delta0: float = 1.0
    shift: float = 1e-10
    cg_rtol: float = 1e-8
    cg_maxiter: int = 500

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown Newton strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 < self.relax <= 1:
            raise ValueError("under-relaxation factor must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.strategy == "inflection" and self.M is None:
            raise ValueError("the inflection strategy needs the viscosity ratio M")


@dataclass
class TrustRegionState:
    radius: float
    max_radius: float
    chi: float = 0.0

    def update(self, rho: float, step_norm: float) -> None:
        if rho < 0.25:
            self.radius *= 0.25
        elif rho > 0.75 and step_norm >= self.radius * (1 - 1e-8):
            self.radius = min(2.0 * self.radius, self.max_radius)


@dataclass
class SolveReport:
    strategy: str
    iterations: int = 0
    step_norms: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    predicted_reductions: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    converged: bool = False
    message: str = ""

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1] if self.residual_norms else float("nan")


class SingularJacobianError(RuntimeError):
    pass


def _as_sparse(J):
    return J if sp.issparse(J) else sp.csr_matrix(np.atleast_2d(np.asarray(J, dtype=float)))


def _newton_direction(J, H, shift=1e-10):
    """Solve ``J d = -H``; retry once with a small diagonal shift."""
    J = _as_sparse(J).tocsc()
    for eps in (0.0, shift):
        A = J if eps == 0 else (J + eps * sp.identity(J.shape[0], format="csc"))
        try:
            with np.errstate(all="ignore"):
                d = spla.splu(A).solve(-np.asarray(H, dtype=float))
        except RuntimeError:
            continue
        if np.all(np.isfinite(d)):
            return d
    raise SingularJacobianError("Newton system is singular")


# ---------------------------------------------------------------------------
# Inflection-point trust regions
# ---------------------------------------------------------------------------

def curvature_sign(s, M):
    return np.sign(_frac_flow(np.asarray(s, dtype=float), M)[2])


def step_inflection(s_current, s_proposed, M, kinks=()):
    """Selective averaging across the inflection point (and kinks), then clamping."""
    s_current = np.asarray(s_current, dtype=float)
    s_proposed = np.asarray(s_proposed, dtype=float)
    c = np.clip(s_current, 0.0, 1.0)
    p = np.clip(s_proposed, 0.0, 1.0)
    cross = _frac_flow(c, M)[2] * _frac_flow(p, M)[2] < 0
    lo, hi = np.minimum(c, p), np.maximum(c, p)
    for k in kinks:
        cross |= (lo < k) & (k < hi)
    # the proposal is clamped before averaging so the mean stays inside the bounds
    out = np.where(cross, 0.5 * (c + p), p)
    return np.clip(out, 0.0, 1.0)


def detect_kinks(flux, samples: int = 4001, jump_tol: float = 1e-3):
    """Saturations where the one-sided derivatives of a scalar flux disagree.

    ``flux`` maps an array of saturations to values. Derivatives are estimated
    by one-sided differences on a uniform grid; interior points whose left and
    right slopes differ by more than ``jump_tol`` (relative to the slope scale)
    are reported, merging neighbours.
    """
    s = np.linspace(0.0, 1.0, samples)
    v = np.asarray(flux(s), dtype=float)
    slope = np.diff(v) / np.diff(s)
    scale = max(np.abs(slope).max(), 1e-300)
    # second difference of a smooth function is O(h); a kink gives O(1)
    jump = np.abs(np.diff(slope)) / scale
    smooth = np.median(jump) * 50 + jump_tol
    idx = np.nonzero(jump > smooth)[0] + 1
    kinks = []
    for i in idx:
        if not kinks or s[i] - kinks[-1] > 2.0 / samples:
            kinks.append(float(s[i]))
    return tuple(kinks)


def gravity_kinks(props) -> tuple:
    """Trust-region boundaries for gravity runs.

    Inflection points of the buoyancy flux shape ``f lambda_o`` together with
    any numerically detected derivative discontinuity of that shape.
    """
    M = props.M

    def shape(s):
        f = _frac_flow(s, M)[0]
        return f * (1 - s) ** 2

    s = np.linspace(0.0, 1.0, 20001)
    v = shape(s)
    d2 = np.gradient(np.gradient(v, s), s)
    pts = []
    sign = np.sign(d2[5:-5])
    for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        a, b = s[i + 5], s[i + 6]
        pts.append(0.5 * (a + b))
    pts.extend(detect_kinks(shape))
    return tuple(sorted(set(round(p, 6) for p in pts)))


# ---------------------------------------------------------------------------
# Trust-region steps
# ---------------------------------------------------------------------------

def _model(H, J, d):
    r = H + J @ d
    return float(r @ r)


def step_dogleg(H, J, delta, newton=None):
    """Dogleg step for ``min ||H + J d||^2`` subject to ``||d|| <= delta``.

    Returns ``(d, chi)``; ``chi`` is the interpolation parameter along the
    dogleg leg (1 for the full Newton step, 0 for a Cauchy-only step).
    """
    H = np.atleast_1d(np.asarray(H, dtype=float))
    J = _as_sparse(J)
    g = J.T @ H
    if not np.any(g):
        return np.zeros_like(H), 0.0
    Jg = J @ g
    t = float(g @ g) / float(Jg @ Jg)
    d_c = -t * g
    if newton is None:
        try:
            newton = _newton_direction(J, H)
        except SingularJacobianError:
            newton = None
    if newton is not None and np.linalg.norm(newton) <= delta:
        return newton, 1.0
    nc = np.linalg.norm(d_c)
    if newton is None or nc >= delta:
        return d_c * (delta / nc) if nc > delta else d_c, 0.0
    # largest chi in [0, 1] with ||d_c + chi (d_n - d_c)|| = delta
    w = newton - d_c
    a, b, c = w @ w, 2 * (d_c @ w), d_c @ d_c - delta ** 2
    chi = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    chi = float(np.clip(chi, 0.0, 1.0))
    return d_c + chi * w, chi


def _solve_2d_trust(B2, g2, delta):
    """``min 1/2 y^T B2 y + g2^T y`` over the disk ``||y|| <= delta``."""
    lam, V = np.linalg.eigh(B2)
    gh = V.T @ g2
    if lam[0] > 1e-14 * max(abs(lam[-1]), 1.0):
        y = -np.linalg.solve(B2, g2)
        if np.linalg.norm(y) <= delta:
            return y
    k = len(lam)
    if k == 1:
        y = -np.sign(g2[0]) * delta * np.ones(1) if g2[0] != 0 else delta * np.ones(1)
        return y
    # secular equation sum gh_i^2 / (lam_i + mu)^2 = delta^2 as a quartic in mu
    l1, l2 = lam
    a1, a2 = gh ** 2
    p1 = np.array([1.0, 2 * l1, l1 * l1])
    p2 = np.array([1.0, 2 * l2, l2 * l2])
    poly = np.polyadd(np.polyadd(a1 * p2, a2 * p1), -delta ** 2 * np.polymul(p1, p2))
    cands = []
    for mu in np.roots(poly):
        if abs(mu.imag) < 1e-10 * max(1.0, abs(mu.real)) and mu.real > -l1:
            m = mu.real
            cands.append(-V @ (gh / (lam + m)))
    # boundary sampling fallback covers the hard case
    th = np.linspace(0, 2 * np.pi, 721)
    ring = delta * np.stack([np.cos(th), np.sin(th)], axis=1)
    q = 0.5 * np.einsum("ij,jk,ik->i", ring, B2, ring) + ring @ g2
    cands.append(ring[int(np.argmin(q))])
    # quartic roots lose accuracy for tiny gh; keep every candidate feasible
    cands = [y * min(1.0, delta / n) if (n := np.linalg.norm(y)) > 0 else y for y in cands]
    vals = [0.5 * y @ B2 @ y + g2 @ y for y in cands]
    return cands[int(np.argmin(vals))]


def _pcg_newton(J, g, rtol, maxiter):
    """Gauss-Newton direction from ``J^T J d = -g`` by preconditioned CG."""
    n = J.shape[0]
    A = spla.LinearOperator((n, n), matvec=lambda x: J.T @ (J @ x), dtype=float)
    Mop = None
    try:
        ilu = spla.spilu(J.tocsc(), drop_tol=1e-6, fill_factor=20)
        Mop = spla.LinearOperator((n, n), matvec=lambda r: ilu.solve(ilu.solve(r, "T"), "N"), dtype=float)
    except RuntimeError:
        pass
    d, _ = spla.cg(A, -g, rtol=rtol, maxiter=maxiter, M=Mop)
    return d


def step_reflective(grad, B, delta, newton_dir=None):
    """Minimise ``1/2 d^T B d + grad^T d`` on ``span{grad, newton_dir}`` within ``||d|| <= delta``."""
    grad = np.atleast_1d(np.asarray(grad, dtype=float))
    if not np.any(grad):
        return np.zeros_like(grad)
    cols = [grad]
    if newton_dir is not None and np.all(np.isfinite(newton_dir)) and np.any(newton_dir):
        cols.append(np.asarray(newton_dir, dtype=float))
    Q, R = np.linalg.qr(np.stack(cols, axis=1))
    keep = np.abs(np.diag(R)) > 1e-12 * np.abs(R[0, 0])
    Q = Q[:, keep]
    BQ = np.column_stack([B @ Q[:, i] for i in range(Q.shape[1])])
    B2 = Q.T @ BQ
    B2 = 0.5 * (B2 + B2.T)
    y = _solve_2d_trust(B2, Q.T @ grad, delta)
    return Q @ y


def reflect_into_bounds(s, lo=0.0, hi=1.0):
    s = np.where(s < lo, 2 * lo - s, s)
    s = np.where(s > hi, 2 * hi - s, s)
    return np.clip(s, lo, hi)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def newton_solve(residual_op, jacobian_op, s_init, config: NewtonConfig):
    """Solve ``H(s) = 0``. Returns ``(s, SolveReport)`` with ``s`` shaped like ``s_init``."""
    shape = np.shape(s_init)
    s = np.asarray(s_init, dtype=float).ravel().copy()
    rep = SolveReport(config.strategy)
    H = np.asarray(residual_op(s), dtype=float).ravel()
    rep.residual_norms.append(float(np.linalg.norm(H)))
    if not np.any(H):
        rep.converged = True
        rep.message = "initial guess solves the system"
        return s.reshape(shape), rep
    if config.strategy in ("dogleg", "reflective"):
        s, ok = _trust_region_loop(residual_op, jacobian_op, s, H, config, rep)
    else:
        s, ok = _line_loop(residual_op, jacobian_op, s, H, config, rep)
    rep.converged = ok
    return s.reshape(shape), rep


def _line_loop(residual_op, jacobian_op, s, H, cfg, rep):
    kinks = tuple(cfg.kinks)
    for it in range(1, cfg.max_iterations + 1):
        try:
            d = _newton_direction(jacobian_op(s), H, cfg.shift)
        except SingularJacobianError as exc:
            rep.message = str(exc)
            return s, False
        if cfg.strategy == "plain":
            s_new = s + d
            if np.any(s_new < -1e-12) or np.any(s_new > 1 + 1e-12) or not np.all(np.isfinite(s_new)):
                rep.iterations = it
                rep.step_norms.append(float(np.linalg.norm(d)))
                rep.message = "plain Newton iterate left [0, 1]"
                return s, False
            s_new = np.clip(s_new, 0.0, 1.0)
        elif cfg.strategy == "under_relax":
            target = np.clip(s + d, 0.0, 1.0) if cfg.enforce_bounds else s + d
            s_new = s + cfg.relax * (target - s)
        else:
            s_new = step_inflection(s, s + d, cfg.M, kinks)
        step = float(np.linalg.norm(s_new - s))
        s = s_new
        H = np.asarray(residual_op(s), dtype=float).ravel()
        rep.iterations = it
        rep.step_norms.append(step)
        rep.residual_norms.append(float(np.linalg.norm(H)))
        if step <= cfg.eta:
            rep.message = "step norm below tolerance"
            return s, True
    rep.message = "iteration cap reached"
    return s, False


def _trust_region_loop(residual_op, jacobian_op, s, H, cfg, rep):
    n = s.size
    tr = TrustRegionState(cfg.delta0, max(np.sqrt(n), cfg.delta0))
    phi = float(H @ H)
    J = _as_sparse(jacobian_op(s)).tocsr()
    for it in range(1, cfg.max_iterations + 1):
        rep.iterations = it
        rep.radii.append(tr.radius)
        g = J.T @ H
        if cfg.strategy == "dogleg":
            d, tr.chi = step_dogleg(H, J, tr.radius)
            pred_d = phi - _model(H, J, d)
            s_try = np.clip(s + d, 0.0, 1.0)
        else:
            dn = _pcg_newton(J, g, cfg.cg_rtol, cfg.cg_maxiter)
            d = step_reflective(g, _GaussNewton(J), tr.radius, dn)
            pred_d = phi - _model(H, J, d)
            s_try = reflect_into_bounds(s + d)
        rep.predicted_reductions.append(pred_d)
        d_eff = s_try - s
        pred = phi - _model(H, J, d_eff)
        step = float(np.linalg.norm(d_eff))
        if step <= cfg.eta and pred >= 0:
            H_try = np.asarray(residual_op(s_try), dtype=float).ravel()
            rep.step_norms.append(step)
            rep.residual_norms.append(float(np.linalg.norm(H_try)))
            rep.message = "step norm below tolerance"
            return s_try, True
        H_try = np.asarray(residual_op(s_try), dtype=float).ravel()
        phi_try = float(H_try @ H_try)
        rho = (phi - phi_try) / pred if pred > 0 else -1.0
        tr.update(rho, float(np.linalg.norm(d)))
        if rho > 0:
            s, H, phi = s_try, H_try, phi_try
            rep.step_norms.append(step)
            rep.residual_norms.append(float(np.sqrt(phi)))
            if phi == 0.0:
                rep.message = "residual vanished"
                return s, True
            J = _as_sparse(jacobian_op(s)).tocsr()
        if tr.radius < 1e-14:
            rep.message = "trust region collapsed"
            return s, False
    rep.message = "iteration cap reached"
    return s, False


class _GaussNewton:
    """Matrix-free ``J^T J``."""

    def __init__(self, J):
        self.J = J

    def __matmul__(self, x):
        return self.J.T @ (self.J @ x)
