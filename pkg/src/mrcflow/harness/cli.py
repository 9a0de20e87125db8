"""Command line: ``mrcflow {run, converge, compare-strategies, gen-field}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..coupling import StepFailure
from ..mesh import build_grid
from .config import ConfigError, RunConfig
from .experiments import (ReferenceCache, StaleReferenceError, build_permeability, compare_strategies,
                          convergence_study, run_experiment)
from .fieldio import FieldParseError, write_field


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}") from None


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _out(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg["output"]["dir"])


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _out(args, cfg)
    res = run_experiment(cfg, out, reference=args.reference, raise_on_failure=False)
    led = res.ledger
    print(f"{cfg['name']}: dt={res.dt:.6g} ({res.dt / res.dt_cfl:.4g} dt_cfl), T={res.T:.6g}, "
          f"steps={len(led)}, newton total={sum(r.newton_iterations for r in led)}")
    if res.errors is not None:
        print(f"saturation L1 error {res.errors.saturation_l1:.6e}, flux L2 error {res.errors.flux_l2:.6e}")
    print(f"outputs in {out}")
    if res.failure is not None:
        print(f"run stopped: {res.failure}", file=sys.stderr)
        return 3
    return 0


def cmd_converge(args) -> int:
    cfg = _load(args)
    out = _out(args, cfg)
    ref_cfg = RunConfig.load(args.reference_config) if args.reference_config else None
    cache = ReferenceCache(args.reference or out / "reference_cache")
    res = convergence_study(cfg, args.ladder, reference_multiple=args.reference_multiple,
                            reference_dt=args.reference_dt, reference_config=ref_cfg, cache=cache, out_dir=out)
    print("dt/dt_cfl      dt              saturation_L1")
    for m, dt, e in zip(res.multiples, res.dts, res.errors):
        print(f"{m:<14g} {dt:<15.6g} {e:.6e}")
    print(f"slope {res.slope:.4f} (reference dt {res.reference_dt:.6g}); table in {out / 'convergence.csv'}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = _out(args, cfg)
    rows = compare_strategies(cfg, args.strategies.split(","), args.multiples, out)
    print(f"{'strategy':<12} {'dt/dt_cfl':>9} {'steps':>6} {'total':>7} {'mean':>7} converged")
    for r in rows:
        print(f"{r['strategy']:<12} {r['dt_over_dt_cfl']:>9g} {r['steps']:>6} {r['total_newton']:>7} "
              f"{r['mean_newton']:>7.2f} {r['converged']}")
    print(f"table in {out / 'strategies.csv'}")
    return 0


def cmd_gen_field(args) -> int:
    if args.config:
        cfg = _load(args)
        gc = cfg["grid"]
        grid = build_grid(gc["nx"], gc["ny"], gc["lx"] / gc["nx"], gc["ly"] / gc["ny"], tuple(gc["origin"]))
        K = build_permeability(cfg, grid)
    else:
        cfg = RunConfig.from_dict({"grid": {"nx": args.nx, "ny": args.ny}, "seed": args.seed,
                                   "permeability": {"std": args.std}, "time": {"T": 1.0, "dt": 1.0}})
        gc = cfg["grid"]
        grid = build_grid(gc["nx"], gc["ny"], 1.0 / gc["nx"], 1.0 / gc["ny"])
        K = build_permeability(cfg, grid)
    out = Path(args.out or "permeability.txt")
    if out.suffix == "" or out.is_dir():
        out = out / "permeability.txt"
    write_field(K, out, grid)
    print(f"wrote {grid.nx}x{grid.ny} field to {out} (min {K.min():.4g}, max {K.max():.4g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrcflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the permeability seed")
        sp.add_argument("--out", default=None, help="output directory (default: output.dir of the config)")

    r = sub.add_parser("run", help="run one configuration")
    common(r)
    r.add_argument("--reference", default=None, help="reference run directory or saturation field file")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("converge", help="time-step convergence study")
    common(c)
    c.add_argument("--ladder", type=_floats, required=True, help="CFL multiples, e.g. 1,2,4,8")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--reference-multiple", type=float, help="reference dt as a CFL multiple")
    g.add_argument("--reference-dt", type=float, help="reference dt in PVI")
    c.add_argument("--reference-config", default=None, help="configuration of the reference run")
    c.add_argument("--reference", default=None, help="reference cache directory")
    c.set_defaults(func=cmd_converge)

    s = sub.add_parser("compare-strategies", help="Newton iteration totals per strategy and step size")
    common(s)
    s.add_argument("--strategies", default="under_relax,inflection,dogleg,reflective")
    s.add_argument("--multiples", type=_floats, required=True, help="CFL multiples")
    s.set_defaults(func=cmd_compare)

    f = sub.add_parser("gen-field", help="write a permeability field file")
    common(f, config_required=False)
    f.add_argument("--nx", type=int, default=64)
    f.add_argument("--ny", type=int, default=64)
    f.add_argument("--std", type=float, default=0.45, help="log-field standard deviation (no --config)")
    f.set_defaults(func=cmd_gen_field)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FieldParseError, StaleReferenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
