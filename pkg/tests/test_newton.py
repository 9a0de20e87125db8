import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from mrcflow.mesh import FaceField, build_grid
from mrcflow.newton import (NewtonConfig, STRATEGIES, SingularJacobianError, TrustRegionState, _newton_direction,
                            _solve_2d_trust, detect_kinks, newton_solve, reflect_into_bounds, step_dogleg,
                            step_inflection, step_reflective)
from mrcflow.rock_fluids import FluidProps, fractional_flow, inflection_point
from mrcflow.transport import TransportProblem

M = 5.0
ETA = 1e-9


def _config(strategy, **kw):
    kw.setdefault("eta", ETA)
    kw.setdefault("max_iterations", 400)
    return NewtonConfig(strategy=strategy, M=M, **kw)


def _single_cell(dt, s0=0.0):
    g = build_grid(1, 1, 1.0, 1.0)
    return TransportProblem(g, np.full(g.shape, s0), dt, FaceField.constant(g, 1.5, 0.0), FluidProps.from_ratio(M))


def _row(nx, dt, M_=M):
    g = build_grid(nx, 1, 1.0 / nx, 1.0)
    return TransportProblem(g, np.zeros(g.shape), dt, FaceField.constant(g, 1.0, 0.0), FluidProps.from_ratio(M_))


def _solve(prob, cfg, s_init=None):
    s0 = prob.s_prev.ravel() if s_init is None else s_init
    return newton_solve(prob.residual, prob.jacobian, s0, cfg)


@pytest.mark.parametrize("strategy", ["under_relax", "inflection", "dogleg", "reflective"])
@pytest.mark.parametrize("dt", [0.05, 1.0, 20.0])
def test_single_cell_root_matches_bisection(strategy, dt):
    prob = _single_cell(dt)
    root = brentq(lambda x: prob.residual(np.array([[x]]))[0], 0.0, 1.0, xtol=1e-15)
    s, rep = _solve(prob, _config(strategy))
    assert rep.converged, rep.message
    assert abs(s[0] - root) <= max(1e-8, 10 * ETA)


def test_zero_residual_takes_no_iterations():
    g = build_grid(3, 2, 0.5, 0.5)
    prob = TransportProblem(g, np.full(g.shape, 0.3), 1.0, FaceField.zeros(g), FluidProps.from_ratio(M))
    for strategy in ("under_relax", "inflection", "dogleg", "reflective"):
        s, rep = _solve(prob, _config(strategy))
        assert rep.converged and rep.iterations == 0
        assert np.array_equal(s, prob.s_prev.ravel())


def test_plain_newton_fails_where_inflection_converges():
    prob = _row(40, dt=2.0)
    _, plain = _solve(prob, _config("plain"))
    assert not plain.converged
    s, infl = _solve(prob, _config("inflection"))
    assert infl.converged
    assert np.all((s >= 0) & (s <= 1))
    assert np.linalg.norm(prob.residual(s)) < 1e-6


def test_strategies_agree_on_a_row():
    prob = _row(25, dt=0.3)
    sols = {}
    for strategy in ("under_relax", "inflection", "dogleg", "reflective"):
        s, rep = _solve(prob, _config(strategy))
        assert rep.converged, (strategy, rep.message)
        sols[strategy] = s
    ref = sols["inflection"]
    for strategy, s in sols.items():
        assert np.linalg.norm(s - ref) <= 10 * ETA, strategy


def test_iterates_stay_in_bounds():
    prob = _row(30, dt=5.0)
    for strategy in ("under_relax", "inflection", "dogleg", "reflective"):
        seen = []

        def res(s, _seen=seen):
            _seen.append(np.array(s, copy=True))
            return prob.residual(s)

        newton_solve(res, prob.jacobian, prob.s_prev.ravel(), _config(strategy))
        for s in seen:
            assert np.all(s >= 0) and np.all(s <= 1), strategy


def test_trust_region_predicted_reduction_nonnegative():
    prob = _row(30, dt=5.0)
    for strategy in ("dogleg", "reflective"):
        _, rep = _solve(prob, _config(strategy))
        assert rep.converged
        assert all(p >= -1e-12 for p in rep.predicted_reductions)
        assert all(r > 0 for r in rep.radii)


def test_step_inflection_examples():
    M_ = 1.0   # inflection at 0.5
    assert step_inflection([0.2], [0.9], M_) == pytest.approx([0.55])
    # the proposal is clamped to 1 before averaging
    assert step_inflection([0.2], [1.3], M_) == pytest.approx([0.6])
    # same side of the inflection point: the proposal is taken as is (after clamping)
    assert step_inflection([0.6], [0.8], M_) == pytest.approx([0.8])
    assert step_inflection([0.6], [1.3], M_) == pytest.approx([1.0])
    # a registered kink also triggers averaging
    assert step_inflection([0.6], [0.8], M_, kinks=(0.7,)) == pytest.approx([0.7])


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5), st.floats(0.2, 20.0))
def test_step_inflection_never_crosses_twice(a, b, m):
    out = float(step_inflection([a], [b], m)[0])
    assert 0.0 <= out <= 1.0
    si = inflection_point(m)
    ca, cb = np.clip([a, b], 0, 1)
    if (ca - si) * (cb - si) < 0:
        # the averaged update moves at most half way
        assert abs(out - ca) <= 0.5 * abs(cb - ca) + 1e-15


def test_dogleg_examples():
    d, chi = step_dogleg(np.array([5.0]), np.array([[6.0]]), 10.0)
    assert d == pytest.approx([-5.0 / 6.0]) and chi == 1.0
    rng = np.random.default_rng(0)
    J = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    H = rng.normal(size=4)
    g = J.T @ H
    d, chi = step_dogleg(H, J, 1e-6)
    assert chi == 0.0
    assert np.allclose(d / np.linalg.norm(d), -g / np.linalg.norm(g))
    for delta in (1e-3, 0.1, 0.5, 2.0, 50.0):
        d, _ = step_dogleg(H, J, delta)
        assert np.linalg.norm(d) <= delta * (1 + 1e-12)
        # the model never increases
        assert np.sum((H + J @ d) ** 2) <= np.sum(H ** 2) + 1e-12


def test_reflective_examples():
    grad = np.array([3.0, -4.0])
    assert np.all(step_reflective(np.zeros(2), np.eye(2), 1.0) == 0)
    d = step_reflective(grad, np.eye(2), 1.0)
    assert d == pytest.approx(-grad / 5.0)
    d = step_reflective(grad, np.eye(2), 100.0)
    assert d == pytest.approx(-grad)
    s = reflect_into_bounds(np.array([-0.2, 0.5, 1.3, 2.5]))
    assert s == pytest.approx([0.2, 0.5, 0.7, 0.0])
    assert np.all((s >= 0) & (s <= 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=2, max_size=2),
       st.floats(0.05, 4.0))
def test_2d_trust_subproblem_matches_brute_force(b, g, delta):
    B = np.array([[b[0], b[1]], [b[1], b[2]]])
    g = np.array(g)
    y = _solve_2d_trust(B, g, delta)
    assert np.linalg.norm(y) <= delta * (1 + 1e-8)
    q = lambda v: 0.5 * v @ B @ v + g @ v  # noqa: E731
    # dense polar sampling of the disk
    r = np.linspace(0, delta, 201)[:, None]
    th = np.linspace(0, 2 * np.pi, 721)[None, :]
    Y = np.stack([(r * np.cos(th)).ravel(), (r * np.sin(th)).ravel()], axis=1)
    best = np.min(0.5 * np.einsum("ij,jk,ik->i", Y, B, Y) + Y @ g)
    scale = 1 + np.abs(B).max() * delta ** 2 + np.abs(g).max() * delta
    assert q(y) <= best + 1e-3 * scale


def test_singular_jacobian_shift_retry():
    J = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    d = _newton_direction(J, np.array([1.0, 0.0]), shift=1e-8)
    assert d == pytest.approx([-1.0, 0.0], abs=1e-6)
    with pytest.raises(SingularJacobianError):
        _newton_direction(sp.csr_matrix((2, 2)), np.array([1.0, 1.0]), shift=0.0)


def test_trust_region_radius_update():
    tr = TrustRegionState(1.0, 4.0)
    tr.update(0.1, 1.0)
    assert tr.radius == 0.25
    tr.update(0.9, 0.25)
    assert tr.radius == 0.5
    tr.update(0.9, 0.1)           # interior step: radius unchanged
    assert tr.radius == 0.5
    for _ in range(5):
        tr.update(0.9, tr.radius)
    assert tr.radius == 4.0


def test_detect_kinks():
    assert detect_kinks(lambda s: np.abs(s - 0.3)) == pytest.approx((0.3,), abs=1e-3)
    assert detect_kinks(lambda s: np.maximum(s - 0.25, 0) + np.maximum(s - 0.75, 0)) \
        == pytest.approx((0.25, 0.75), abs=1e-3)
    assert detect_kinks(lambda s: fractional_flow(s, 4.0)[0]) == ()


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(strategy="bogus")
    with pytest.raises(ValueError):
        NewtonConfig(strategy="inflection")          # M missing
    with pytest.raises(ValueError):
        NewtonConfig(strategy="under_relax", relax=0.0)
    with pytest.raises(ValueError):
        NewtonConfig(strategy="dogleg", eta=0.0)
    assert set(STRATEGIES) == {"plain", "under_relax", "inflection", "dogleg", "reflective"}
