"""Experiment drivers: single runs, time-step convergence studies, strategy comparisons.

Outputs of a run directory::

    config.yaml                resolved configuration (defaults filled in)
    summary.csv                key,value pairs (dt, T, dt_cfl, steps, iteration totals, hashes)
    ledger.csv                 one row per time step, see LEDGER_HEADER
    saturation_final.txt       field file (see fieldio)
    pressure_final.txt         field file, when a pressure is available
    velocity_ux.txt, velocity_uy.txt   face velocities, one row per grid row
    snapshots/saturation_t<time>.txt   requested PVI snapshots
    errors.csv                 when a reference is supplied (see ErrorReport.write_csv)
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..coupling import (FineBackend, FlowProblem, MRCMBackend, RunResult, SFIConfig, SIConfig, StepFailure,
                        PhysicalModel, boundary_inflow_bc, cfl_for, nondimensionalize, pressure_drop_bc,
                        quarter_five_spot_scales, run, MILLIDARCY, WellModel)
from ..darcy import BoundarySpec
from ..mesh import FaceField, build_decomposition, build_grid
from ..mrcm import (RobinParamField, adaptive_alpha, build_polynomial_space, detect_structures,
                    full_trace_space, physics_space)
from ..newton import NewtonConfig
from ..rock_fluids import ChannelSpec, FluidProps, channel_field, gen_gaussian_field, load_perm_ascii
from .config import ConfigError, RunConfig
from .fieldio import read_field, write_field
from .metrics import ErrorReport, flux_error, saturation_error

LEDGER_HEADER = ["step", "time", "newton_iterations", "outer_iterations", "per_outer",
                 "outer_converged", "final_step_norm"]

# keys that define the physical problem; a reference must agree on all of them
_PROBLEM_SECTIONS = ("grid", "units", "permeability", "fluid", "gravity", "boundary", "wells", "initial")


class StaleReferenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------

def build_permeability(cfg: RunConfig, grid, seed: int | None = None) -> np.ndarray:
    pc = cfg["permeability"]
    seed = cfg.seed if seed is None else seed
    src = pc["source"]
    if src == "gaussian":
        return gen_gaussian_field(grid, seed, pc["scale_exponent"], std=pc["std"])
    if src == "constant":
        return grid.full(pc["background"])
    if src == "channel":
        K = channel_field(grid, ChannelSpec(tuple(tuple(float(v) for v in r) for r in pc["regions"]),
                                            pc["background"]))
        if pc["noise_seed"] is not None:
            K = K * gen_gaussian_field(grid, pc["noise_seed"], pc["scale_exponent"], std=pc["noise_std"])
        return K
    # file
    path = Path(pc["path"])
    if not path.exists():
        raise ConfigError(f"permeability.path: file {path} not found")
    if pc["format"] == "field":
        full, _ = read_field(path)
    else:
        nx_f, ny_f = pc["file_nx"], pc["file_ny"]
        if nx_f is None or ny_f is None:
            raise ConfigError("permeability: file_nx and file_ny are required for the spe10 format")
        full = load_perm_ascii(path, nx_f, ny_f, pc["layer"], pc["transpose"])
    i0, j0 = (int(v) for v in pc["window"])
    if j0 + grid.ny > full.shape[0] or i0 + grid.nx > full.shape[1]:
        raise ConfigError(f"permeability.window {[i0, j0]} with grid {grid.nx}x{grid.ny} exceeds the "
                          f"file field {full.shape[1]}x{full.shape[0]}")
    return np.array(full[j0:j0 + grid.ny, i0:i0 + grid.nx], dtype=float)


def initial_saturation(cfg: RunConfig, grid) -> np.ndarray:
    ic = cfg["initial"]
    s = grid.full(ic["s0"])
    s[:, :ic["strip_cells"]] = 1.0
    if ic["bump_cells"] and ic["bump_width"]:
        jc = grid.ny // 2
        j0 = jc - ic["bump_width"] // 2
        s[j0:j0 + ic["bump_width"], ic["strip_cells"]:ic["strip_cells"] + ic["bump_cells"]] = 1.0
    return s


def _boundary(cfg: RunConfig, grid) -> BoundarySpec:
    b = cfg["boundary"]
    if b["type"] == "inflow":
        return boundary_inflow_bc(grid, b["rate"])
    if b["type"] == "pressure_drop":
        return pressure_drop_bc(grid, b["p_left"], b["p_right"])
    return BoundarySpec.no_flow(grid)


@dataclass
class Setup:
    config: RunConfig
    problem: FlowProblem
    backend: object
    scales: object = None
    decomp: object = None


def build_setup(cfg: RunConfig, seed: int | None = None) -> Setup:
    gc = cfg["grid"]
    units = cfg["units"]
    fl = cfg["fluid"]
    physical = units["system"] == "physical"
    lx, ly = gc["lx"], gc["ly"]
    scales = None
    if physical:
        # grid extents in metres, permeability in millidarcy, fluids per the units section
        grid_m = build_grid(gc["nx"], gc["ny"], lx / gc["nx"], ly / gc["ny"], tuple(gc["origin"]))
        K_md = build_permeability(cfg, grid_m, seed)
        scales = quarter_five_spot_scales(float(K_md.max()), units["L"], units["mu_w_cp"], units["rho_w"],
                                          units["rate_pvi_per_year"])
        g_phys = units["g"] if cfg["gravity"]["enabled"] else 0.0
        model = nondimensionalize(PhysicalModel(grid_m.dx, grid_m.dy, K_md * MILLIDARCY,
                                                units["mu_w_cp"] * 1e-3, units["mu_o_cp"] * 1e-3,
                                                units["rho_w"], units["rho_o"], g_phys,
                                                origin=tuple(gc["origin"])), scales)
        grid = build_grid(gc["nx"], gc["ny"], model.dx, model.dy, model.origin)
        K, props, g = model.K, model.props, model.g
    else:
        grid = build_grid(gc["nx"], gc["ny"], lx / gc["nx"], ly / gc["ny"], tuple(gc["origin"]))
        K = build_permeability(cfg, grid, seed)
        if fl["mu_w"] is not None:
            props = FluidProps(fl["mu_w"], fl["mu_o"], fl["rho_w"], fl["rho_o"])
        else:
            props = FluidProps.from_ratio(fl["M"], fl["rho_w"], fl["rho_o"])
        g = cfg["gravity"]["g"] if cfg["gravity"]["enabled"] else 0.0
    wells = WellModel(tuple(((int(w["cell"][0]), int(w["cell"][1])), float(w["rate"]))
                            for w in cfg["wells"]["list"]), cfg["wells"]["s_inj"])
    problem = FlowProblem(grid, K, props, _boundary(cfg, grid), initial_saturation(cfg, grid), wells,
                          cfg["wells"]["s_inj"], g, cfg["gravity"]["direction"])
    backend, decomp = make_velocity_backend(cfg, problem)
    return Setup(cfg, problem, backend, scales, decomp)


def make_velocity_backend(cfg: RunConfig, problem: FlowProblem):
    vc = cfg["velocity"]
    if vc["backend"] == "fine":
        return FineBackend(), None
    mx, my = (int(v) for v in vc["decomposition"])
    decomp = build_decomposition(problem.grid, mx, my)
    maps = None
    if vc["spaces"] == "physics" or vc["alpha"] == "adaptive":
        maps = [detect_structures(problem.K, itf, vc["hi_factor"], vc["lo_factor"]) for itf in decomp.interfaces]
    if vc["spaces"] == "full":
        spaces = full_trace_space(decomp)
    elif vc["spaces"] == "physics":
        spaces = physics_space(decomp, maps)
    else:
        spaces = build_polynomial_space(decomp, 0 if vc["spaces"] == "P0" else 1)
    if vc["alpha"] == "adaptive":
        alpha = adaptive_alpha(decomp, maps, vc["alpha_low"], vc["alpha_high"])
    else:
        alpha = RobinParamField.uniform(decomp, vc["alpha_value"])
    return MRCMBackend(decomp, spaces, alpha), decomp


def resolve_time(setup: Setup, dt_cfl_value: float | None = None) -> tuple[float, float, float]:
    """``(dt, T, dt_cfl)``; CFL multiples are snapped down so that ``T`` is an integer number of steps."""
    tc = setup.config["time"]
    dtc = dt_cfl_value if dt_cfl_value is not None else \
        cfl_for(setup.problem, setup.backend, use_gravity=setup.config["gravity"]["enabled"])
    if tc["T"] is not None:
        T = float(tc["T"])
    else:
        if not np.isfinite(dtc):
            raise ConfigError("time.T_cfl: the CFL step is unbounded (no flow); give T in PVI")
        T = tc["T_cfl"] * dtc
    if tc["dt"] is not None:
        dt = float(tc["dt"])
        n = round(T / dt)
        if n < 1 or abs(n * dt - T) > 1e-9 * T:
            raise ConfigError(f"time.dt={dt} does not divide T={T}")
    else:
        if not np.isfinite(dtc):
            raise ConfigError("time.dt_cfl: the CFL step is unbounded (no flow); give dt in PVI")
        # round the step count up so that dt never exceeds the requested multiple
        n = max(1, math.ceil(T / (tc["dt_cfl"] * dtc) * (1 - 1e-12)))
        dt = T / n
    return dt, T, dtc


def scheme_config(cfg: RunConfig, dt: float, T: float, props: FluidProps):
    nc = cfg["newton"]
    newton = NewtonConfig(nc["strategy"], eta=nc["eta"], max_iterations=nc["max_iterations"], relax=nc["relax"],
                          M=props.M, delta0=nc["delta0"])
    sc = cfg["scheme"]
    si = SIConfig(dt, T, newton, cfg["velocity"]["backend"], cfg["gravity"]["enabled"], sc["transport"],
                  sc["update_velocity"])
    if sc["type"] == "SFI":
        return SFIConfig(si, sc["outer_tol"], sc["outer_cap"])
    return si


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _time_tag(t: float) -> str:
    return format(t, ".6g")


def write_ledger(ledger, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_HEADER)
        for r in ledger:
            w.writerow([r.step, repr(r.time), r.newton_iterations, r.outer_iterations,
                        " ".join(str(v) for v in r.per_outer), int(r.outer_converged), repr(r.final_step_norm)])
    return path


def read_ledger(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def _save_velocity(u: FaceField, out: Path):
    np.savetxt(out / "velocity_ux.txt", u.ux, fmt="%.17g")
    np.savetxt(out / "velocity_uy.txt", u.uy, fmt="%.17g")


def _load_velocity(d: Path, grid) -> FaceField | None:
    if not (d / "velocity_ux.txt").exists():
        return None
    return FaceField(grid, np.loadtxt(d / "velocity_ux.txt"), np.loadtxt(d / "velocity_uy.txt"))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def problem_hash(cfg: RunConfig) -> str:
    d = {k: cfg.data[k] for k in _PROBLEM_SECTIONS}
    d["seed"] = cfg.seed
    d["T"] = (cfg["time"]["T"], cfg["time"]["T_cfl"])
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=repr).encode()).hexdigest()


@dataclass
class ExperimentResult:
    config: RunConfig
    dt: float
    T: float
    dt_cfl: float
    result: RunResult | None
    errors: ErrorReport | None = None
    out_dir: Path | None = None
    failure: StepFailure | None = None
    files: dict = field(default_factory=dict)

    @property
    def ledger(self):
        if self.result is not None:
            return self.result.ledger
        return self.failure.ledger if self.failure else []


@dataclass
class Reference:
    s: np.ndarray
    u: FaceField | None
    snapshots: dict
    problem_hash: str | None = None


def load_reference(path) -> Reference:
    """A run directory (with summary.csv) or a bare saturation field file."""
    path = Path(path)
    if path.is_file():
        s, _ = read_field(path)
        return Reference(s, None, {})
    summ = dict(read_summary(path / "summary.csv"))
    snaps = {}
    for f in sorted((path / "snapshots").glob("saturation_t*.txt")) if (path / "snapshots").exists() else []:
        snaps[f.stem[len("saturation_t"):]] = read_field(f)[0]
    s, grid = read_field(path / "saturation_final.txt")
    return Reference(s, _load_velocity(path, grid), snaps, summ.get("problem_hash"))


def read_summary(path) -> list[tuple[str, str]]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return [(r[0], r[1]) for r in rows[1:]]


def compare_to_reference(res: RunResult, ref: Reference) -> ErrorReport:
    keys = [_time_tag(t) for t in res.times]
    common = [(k, s) for k, s in zip(keys, res.snapshots) if k in ref.snapshots]
    rep = ErrorReport.compare(res.s, ref.s, res.u if ref.u is not None else None, ref.u,
                              [s for _, s in common], [ref.snapshots[k] for k, _ in common],
                              [float(k) for k, _ in common])
    return rep


def run_experiment(cfg: RunConfig, out_dir=None, reference=None, seed: int | None = None,
                   dt_cfl_value: float | None = None, raise_on_failure: bool = True) -> ExperimentResult:
    """Build, run and (optionally) write one configuration.

    ``reference`` is a run directory, a field file, or a ``Reference``; a
    reference computed for a different physical problem is refused.
    """
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    setup = build_setup(cfg)
    dt, T, dtc = resolve_time(setup, dt_cfl_value)
    scheme = scheme_config(cfg, dt, T, setup.problem.props)
    snaps = [float(t) for t in cfg["time"]["snapshots"]]
    failure = None
    try:
        res = run(setup.problem, scheme, setup.backend, snapshot_times=snaps)
    except StepFailure as exc:
        if raise_on_failure and out_dir is None:
            raise
        res, failure = None, exc
    ref = None
    if reference is not None:
        ref = reference if isinstance(reference, Reference) else load_reference(reference)
        ph = problem_hash(cfg)
        if ref.problem_hash is not None and ref.problem_hash != ph:
            raise StaleReferenceError("reference was computed for a different problem "
                                      f"({ref.problem_hash[:12]} != {ph[:12]}); regenerate it")
    errors = compare_to_reference(res, ref) if (ref is not None and res is not None) else None
    out = ExperimentResult(cfg, dt, T, dtc, res, errors, failure=failure)
    if out_dir is not None:
        _write_outputs(out, setup, Path(out_dir))
        if failure is not None and raise_on_failure:
            raise failure
    return out


def _write_outputs(out: ExperimentResult, setup: Setup, d: Path):
    d.mkdir(parents=True, exist_ok=True)
    grid = setup.problem.grid
    (d / "config.yaml").write_text(out.config.dump())
    files = {"config": d / "config.yaml", "ledger": write_ledger(out.ledger, d / "ledger.csv")}
    res = out.result
    rows = [("name", out.config["name"]), ("dt", repr(out.dt)), ("T", repr(out.T)),
            ("dt_cfl", repr(out.dt_cfl)), ("dt_over_dt_cfl", repr(out.dt / out.dt_cfl)),
            ("steps", str(round(out.T / out.dt))), ("completed_steps", str(len(out.ledger))),
            ("total_newton", str(sum(r.newton_iterations for r in out.ledger))),
            ("mean_newton", repr(sum(r.newton_iterations for r in out.ledger) / max(len(out.ledger), 1))),
            ("max_outer", str(max((r.outer_iterations for r in out.ledger), default=0))),
            ("status", "ok" if out.failure is None else f"failed: {out.failure}"),
            ("config_hash", out.config.content_hash()), ("problem_hash", problem_hash(out.config)),
            ("version", __version__)]
    if res is not None:
        files["saturation"] = write_field(res.s, d / "saturation_final.txt", grid)
        if res.p is not None:
            files["pressure"] = write_field(res.p, d / "pressure_final.txt", grid)
        _save_velocity(res.u, d)
        if out.config["output"]["write_snapshots"] and res.times:
            snapdir = d / "snapshots"
            if snapdir.exists():
                shutil.rmtree(snapdir)
            for t, s in zip(res.times, res.snapshots):
                write_field(s, snapdir / f"saturation_t{_time_tag(t)}.txt", grid)
    if out.errors is not None:
        files["errors"] = out.errors.write_csv(d / "errors.csv")
    with (d / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerows(rows)
    files["summary"] = d / "summary.csv"
    out.out_dir = d
    out.files = files


# ---------------------------------------------------------------------------
# Reference cache
# ---------------------------------------------------------------------------

class ReferenceCache:
    """Reference runs stored under ``root/<config hash>/`` with a manifest of file hashes.

    A cached entry is reused only when the manifest's configuration hash and
    package version match and every recorded file still has its recorded
    SHA-256; anything else is treated as stale and recomputed.
    """

    def __init__(self, root):
        self.root = Path(root)

    def key(self, cfg: RunConfig) -> str:
        return hashlib.sha256((cfg.content_hash() + __version__).encode()).hexdigest()[:24]

    def _valid(self, d: Path, key: str) -> bool:
        man = d / "manifest.json"
        if not man.exists():
            return False
        try:
            m = json.loads(man.read_text())
        except json.JSONDecodeError:
            return False
        if m.get("key") != key:
            return False
        return all((d / name).exists() and _sha(d / name) == h for name, h in m.get("files", {}).items())

    def get(self, cfg: RunConfig, dt_cfl_value: float | None = None) -> tuple[Reference, Path]:
        key = self.key(cfg)
        d = self.root / key
        if not self._valid(d, key):
            if d.exists():
                shutil.rmtree(d)
            res = run_experiment(cfg, d, dt_cfl_value=dt_cfl_value)
            names = sorted(str(p.relative_to(d)) for p in d.rglob("*.txt")) + ["summary.csv"]
            (d / "manifest.json").write_text(json.dumps(
                {"key": key, "files": {n: _sha(d / n) for n in names}, "dt": res.dt}, indent=1, sort_keys=True))
        return load_reference(d), d


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def fit_slope(dts, errors) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)`` over the positive errors."""
    dts, errors = np.asarray(dts, float), np.asarray(errors, float)
    keep = errors > 0
    if keep.sum() < 2:
        raise ValueError("need at least two nonzero errors to fit a slope")
    return float(np.polyfit(np.log(dts[keep]), np.log(errors[keep]), 1)[0])


@dataclass
class ConvergenceResult:
    multiples: list
    dts: list
    errors: list
    flux_errors: list
    slope: float
    reference_dt: float
    dt_cfl: float
    runs: list = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dt_over_dt_cfl", "dt", "saturation_l1", "flux_l2", "in_fit"])
            for m, dt, e, fe in zip(self.multiples, self.dts, self.errors, self.flux_errors):
                w.writerow([repr(m), repr(dt), repr(e), repr(fe), int(e > 0)])
            w.writerow(["slope", "", repr(self.slope), "", ""])
        return path


def convergence_study(base: RunConfig, multiples, reference_multiple: float | None = None,
                      reference_dt: float | None = None, reference_config: RunConfig | None = None,
                      cache: ReferenceCache | None = None, out_dir=None) -> ConvergenceResult:
    """Error of each ladder step size against a finer reference run.

    ``multiples`` are CFL multiples for ``dt``; the reference uses
    ``reference_dt`` (PVI) or ``reference_multiple`` and, optionally, a
    different configuration (for instance another transport scheme or the
    fine velocity backend). Points whose step equals the reference step are
    reported with zero error and left out of the fit.
    """
    multiples = [float(m) for m in multiples]
    if len(multiples) < 3:
        raise ValueError("a convergence study needs at least 3 ladder points")
    if sorted(multiples) != multiples:
        raise ValueError("ladder must be sorted ascending")
    if (reference_multiple is None) == (reference_dt is None):
        raise ValueError("give exactly one of reference_multiple or reference_dt")
    setup = build_setup(base)
    dtc = cfl_for(setup.problem, setup.backend, use_gravity=base["gravity"]["enabled"])
    ref_cfg = (reference_config or base)
    if problem_hash(ref_cfg) != problem_hash(base):
        raise StaleReferenceError("reference configuration describes a different problem")
    ref_cfg = ref_cfg.with_time(dt=reference_dt) if reference_dt is not None \
        else ref_cfg.with_time(dt_cfl=reference_multiple)
    # the reference shares the ladder's CFL step so that both resolve to the same T
    if cache is not None:
        ref, ref_dir = cache.get(ref_cfg, dtc)
        ref_dt = float(dict(read_summary(ref_dir / "summary.csv"))["dt"])
    else:
        rr = run_experiment(ref_cfg, dt_cfl_value=dtc)
        ref = Reference(rr.result.s, rr.result.u, {}, problem_hash(ref_cfg))
        ref_dt = rr.dt
    dts, errs, ferrs, runs = [], [], [], []
    for m in multiples:
        cfg = base.with_time(dt_cfl=m)
        r = run_experiment(cfg, dt_cfl_value=dtc)
        if r.dt < ref_dt * (1 - 1e-12):
            raise ValueError(f"reference step {ref_dt} is not finer than ladder step {r.dt}")
        same = abs(r.dt - ref_dt) <= 1e-12 * ref_dt
        dts.append(r.dt)
        errs.append(0.0 if same else saturation_error(r.result.s, ref.s))
        ferrs.append(0.0 if same or ref.u is None else flux_error(r.result.u, ref.u))
        runs.append(r)
    keep = [i for i, e in enumerate(errs) if e > 0]
    slope = fit_slope([dts[i] for i in keep], [errs[i] for i in keep])
    out = ConvergenceResult(multiples, dts, errs, ferrs, slope, ref_dt, dtc, runs)
    if out_dir is not None:
        out.write_csv(Path(out_dir) / "convergence.csv")
    return out


def compare_strategies(base: RunConfig, strategies, multiples, out_dir=None) -> list[dict]:
    """Newton iteration totals per (strategy, CFL multiple); failures are recorded, not raised."""
    setup = build_setup(base)
    dtc = cfl_for(setup.problem, setup.backend, use_gravity=base["gravity"]["enabled"])
    rows = []
    for strat in strategies:
        for m in multiples:
            cfg = base.with_overrides(newton={"strategy": strat}).with_time(dt_cfl=m)
            r = run_experiment(cfg, dt_cfl_value=dtc, raise_on_failure=False,
                               out_dir=None if out_dir is None else Path(out_dir) / f"{strat}_x{m:g}")
            led = r.ledger
            tot = sum(x.newton_iterations for x in led)
            rows.append(dict(strategy=strat, dt_over_dt_cfl=m, dt=r.dt, steps=round(r.T / r.dt),
                             completed=len(led), total_newton=tot, mean_newton=tot / max(len(led), 1),
                             max_newton=max((x.newton_iterations for x in led), default=0),
                             converged=r.failure is None))
    if out_dir is not None:
        path = Path(out_dir) / "strategies.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
