import numpy as np
import pytest

from mrcflow.coupling import (FineBackend, FlowProblem, MRCMBackend, PhysicalModel, SFIConfig, SIConfig,
                              StepFailure, WellModel, boundary_inflow_bc, cfl_for, injection_rate,
                              nondimensionalize, pressure_drop_bc, quarter_five_spot_scales, redimensionalize,
                              run, si_step, transport_problem, DimensionlessScales)
from mrcflow.darcy import BoundarySpec
from mrcflow.mesh import build_decomposition, build_grid
from mrcflow.mrcm import RobinParamField, build_polynomial_space
from mrcflow.newton import NewtonConfig
from mrcflow.rock_fluids import FluidProps, gen_gaussian_field


def _problem(n=16, M=5.0, seed=3, std=0.45, **kw):
    g = build_grid(n, n, 1 / n, 1 / n)
    K = gen_gaussian_field(g, seed, std=std)
    return FlowProblem(g, K, FluidProps.from_ratio(M), boundary_inflow_bc(g), **kw)


def _si(problem, dt, T, strategy="inflection", **kw):
    return SIConfig(dt, T, NewtonConfig(strategy, eta=1e-8, M=problem.props.M), **kw)


def test_sfi_with_cap_one_is_bitwise_si():
    prob = _problem()
    dtc = cfl_for(prob)
    si = _si(prob, 8 * dtc, 40 * dtc)
    a = run(prob, si, FineBackend())
    b = run(prob, SFIConfig(si, outer_tol=1e-6, outer_cap=1), FineBackend())
    assert np.array_equal(a.s, b.s)
    assert np.array_equal(a.u.ux, b.u.ux) and np.array_equal(a.u.uy, b.u.uy)
    assert [r.newton_iterations for r in a.ledger] == [r.newton_iterations for r in b.ledger]


def test_no_injection_is_a_fixed_point():
    g = build_grid(8, 8, 1 / 8, 1 / 8)
    bc = BoundarySpec(g)                      # closed box
    prob = FlowProblem(g, np.ones(g.shape), FluidProps.from_ratio(4.0), bc, s0=0.3)
    res = run(prob, SIConfig(0.1, 0.5, NewtonConfig("inflection", M=4.0)), FineBackend())
    assert np.array_equal(res.s, prob.s0)
    assert res.u.l2() == 0
    assert all(r.newton_iterations == 0 for r in res.ledger)


def test_single_step_when_dt_equals_T():
    prob = _problem(8)
    dtc = cfl_for(prob)
    res = run(prob, _si(prob, 3 * dtc, 3 * dtc), FineBackend(), snapshot_times=[0.0, 3 * dtc])
    assert len(res.ledger) == 1
    assert res.times == pytest.approx([0.0, 3 * dtc])
    assert np.array_equal(res.snapshots[-1], res.s)


def test_nsteps_requires_divisibility():
    with pytest.raises(ValueError):
        SIConfig(0.3, 1.0).nsteps
    with pytest.raises(ValueError):
        SIConfig(2.0, 1.0)
    assert SIConfig(0.25, 1.0).nsteps == 4


def test_small_steps_need_few_iterations():
    prob = _problem(16)
    dtc = cfl_for(prob)
    its = []
    for m in (0.01, 0.1, 1.0):
        res = run(prob, _si(prob, m * dtc, 4 * dtc), FineBackend())
        its.append(max(r.newton_iterations for r in res.ledger))
    # as dt -> 0 the previous state is an increasingly good initial guess
    assert its[0] <= its[1] <= its[2]
    assert its[0] <= 3


def test_pvi_bookkeeping():
    prob = _problem(12, M=2.0)
    dtc = cfl_for(prob)
    _, u = FineBackend().solve(prob, prob.s0)
    tp = transport_problem(prob, prob.s0, dtc, u)
    # the rescaled velocity injects one pore volume per unit time
    assert injection_rate(prob, tp.u) == pytest.approx(prob.grid.area, rel=1e-12)
    cfg = _si(prob, dtc, dtc, update_velocity=False)
    ncfg = NewtonConfig("inflection", eta=1e-13, M=prob.props.M, max_iterations=200)
    s, injected, produced = prob.s0.copy(), 0.0, 0.0
    for _ in range(15):
        tp = transport_problem(prob, s, dtc, u)
        s_new = si_step(prob, s, u, cfg, FineBackend(), ncfg).s
        # boundary inflow of f(s_inj) = 1 minus outflow at the new state
        net = tp.boundary_net_flux(s_new)
        injected += dtc * prob.grid.area
        produced += dtc * (net + prob.grid.area)
        s = s_new
    water = (s - prob.s0).sum() * prob.grid.cell_volume
    assert water == pytest.approx(injected - produced, abs=1e-11)
    assert injected == pytest.approx(15 * dtc, rel=1e-12)


def test_frozen_velocity_not_modified():
    prob = _problem(10)
    _, u = FineBackend().solve(prob, prob.s0)
    before = u.checksum()
    dtc = cfl_for(prob)
    run(prob, _si(prob, 4 * dtc, 8 * dtc, update_velocity=False), FineBackend(), u0=u)
    assert u.checksum() == before


def test_nondimensionalize_round_trip(rng):
    sc = quarter_five_spot_scales(K_max_md=1000.0)
    K = np.exp(rng.normal(size=(5, 4))) * 1e-13
    m = PhysicalModel(3.0, 3.0, K, 3e-4, 3e-3, 1000.0, 800.0, 9.80665, q=rng.normal(size=(5, 4)),
                      p=rng.normal(size=(5, 4)) * 1e5, u=1e-7, t=3.2e7, origin=(1.0, 2.0))
    back = redimensionalize(nondimensionalize(m, sc), sc)
    for name in ("dx", "dy", "mu_w", "mu_o", "rho_w", "rho_o", "g", "u", "t"):
        assert getattr(back, name) == pytest.approx(getattr(m, name), rel=1e-14)
    for name in ("K", "q", "p"):
        assert np.allclose(getattr(back, name), getattr(m, name), rtol=1e-14, atol=0)
    star = nondimensionalize(m, sc)
    assert star.mu_w == pytest.approx(1.0) and star.rho_w == pytest.approx(1.0)
    # identity scales leave everything alone
    one = DimensionlessScales(1.0, 1.0, 1.0, 1.0, 1.0)
    same = nondimensionalize(m, one)
    assert np.array_equal(same.K, m.K) and same.g == m.g
    # g* = g rho_w K_max / (mu_w u_ref)
    assert star.g == pytest.approx(m.g * sc.rho_w * sc.K_max / (sc.mu_w * sc.u_ref), rel=1e-14)


def test_well_model():
    g = build_grid(4, 3, 0.5, 0.5)
    w = WellModel((((0, 0), 2.0), ((3, 2), -2.0)))
    q = w.source(g)
    assert q.sum() * g.cell_volume == pytest.approx(0.0)
    assert q[0, 0] == pytest.approx(2.0 / g.cell_volume)
    assert w.injection_rate == 2.0
    with pytest.raises(ValueError):
        WellModel((((4, 0), 1.0),)).source(g)


def test_step_failure_carries_partial_ledger():
    prob = _problem(12, M=10.0)
    dtc = cfl_for(prob)
    cfg = SIConfig(8 * dtc, 40 * dtc, NewtonConfig("plain", eta=1e-8, max_iterations=30))
    with pytest.raises(StepFailure) as info:
        run(prob, cfg, FineBackend())
    assert info.value.report is not None
    assert isinstance(info.value.ledger, list)
    assert len(info.value.ledger) < cfg.nsteps


def test_fine_and_mrcm_iterations_comparable():
    prob = _problem(32, M=5.0, seed=4)
    d = build_decomposition(prob.grid, 4, 4)
    mrcm = MRCMBackend(d, build_polynomial_space(d, 1), RobinParamField.uniform(d, 1.0))
    dtc = cfl_for(prob)
    cfg = _si(prob, 16 * dtc, 64 * dtc)
    a = run(prob, cfg, FineBackend())
    b = run(prob, cfg, mrcm)
    assert b.total_newton <= 2 * a.total_newton and a.total_newton <= 2 * b.total_newton


def test_large_steps_converge():
    prob = _problem(24, M=10.0, seed=9)
    dtc = cfl_for(prob)
    res = run(prob, _si(prob, 100 * dtc, 1000 * dtc), FineBackend())
    assert len(res.ledger) == 10
    assert np.all((res.s >= 0) & (res.s <= 1))


def test_explicit_baseline_matches_implicit_for_small_steps():
    prob = _problem(16, M=2.0)
    dtc = cfl_for(prob)
    T = 32 * dtc
    e = run(prob, _si(prob, 0.5 * dtc, T, transport="explicit", update_velocity=False), FineBackend())
    i = run(prob, _si(prob, 0.5 * dtc, T, update_velocity=False), FineBackend())
    assert np.abs(e.s - i.s).sum() / np.abs(i.s).sum() < 0.15
    assert all(r.newton_iterations == 0 for r in e.ledger)


def test_pressure_drop_bc_drives_flow_right():
    g = build_grid(6, 4, 1 / 6, 1 / 4)
    prob = FlowProblem(g, np.ones(g.shape), FluidProps.from_ratio(1.0), pressure_drop_bc(g))
    _, u = FineBackend().solve(prob, prob.s0)
    assert np.all(u.ux > 0)
    assert np.allclose(u.uy, 0, atol=1e-9 * np.abs(u.ux).max())
