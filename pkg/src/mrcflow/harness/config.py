"""Run configuration: a YAML document validated against a fixed schema.

Every section is optional except ``grid``; unknown sections or keys are
rejected with the dotted path of the offending entry. ``RunConfig.data``
always holds the fully populated (defaults filled in) document, which is also
what gets hashed for the reference cache.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


_NUM = (int, float)

# section -> key -> (accepted types, default); a default of _REQ marks a required key
_REQ = object()

SCHEMA: dict[str, dict[str, tuple]] = {
    "": {"name": ((str,), "run"), "seed": ((int, type(None)), None), "description": ((str,), "")},
    "grid": {"nx": ((int,), _REQ), "ny": ((int,), _REQ), "lx": (_NUM, 1.0), "ly": (_NUM, 1.0),
             "origin": ((list,), [0.0, 0.0])},
    "units": {"system": ((str,), "dimensionless"), "L": (_NUM, 182.88), "mu_w_cp": (_NUM, 0.3),
              "mu_o_cp": (_NUM, 3.0), "rho_w": (_NUM, 1000.0), "rho_o": (_NUM, 800.0),
              "g": (_NUM, 9.80665), "rate_pvi_per_year": (_NUM, 0.2)},
    "permeability": {"source": ((str,), "gaussian"), "seed": ((int,), 1), "scale_exponent": (_NUM, 4.5),
                     "std": (_NUM, 0.45), "background": (_NUM, 1.0), "regions": ((list,), []),
                     "noise_seed": ((int, type(None)), None), "noise_std": (_NUM, 0.25),
                     "path": ((str, type(None)), None), "format": ((str,), "field"),
                     "file_nx": ((int, type(None)), None), "file_ny": ((int, type(None)), None),
                     "layer": ((int,), 0), "transpose": ((bool,), False), "window": ((list,), [0, 0])},
    "fluid": {"M": (_NUM + (type(None),), 10.0), "mu_w": (_NUM + (type(None),), None),
              "mu_o": (_NUM + (type(None),), None), "rho_w": (_NUM, 1.0), "rho_o": (_NUM, 1.0)},
    "gravity": {"enabled": ((bool,), False), "g": (_NUM, 0.0), "direction": ((int,), -1)},
    "boundary": {"type": ((str,), "inflow"), "rate": (_NUM, 1.0), "p_left": (_NUM, 0.0),
                 "p_right": (_NUM, -1e4)},
    "wells": {"list": ((list,), []), "s_inj": (_NUM, 1.0)},
    "initial": {"s0": (_NUM, 0.0), "strip_cells": ((int,), 0), "bump_cells": ((int,), 0),
                "bump_width": ((int,), 0)},
    "velocity": {"backend": ((str,), "fine"), "decomposition": ((list,), [4, 4]),
                 "spaces": ((str,), "P1"), "alpha": ((str,), "uniform"), "alpha_value": (_NUM, 1.0),
                 "alpha_low": (_NUM, 1e-2), "alpha_high": (_NUM, 1e2), "hi_factor": (_NUM, 10.0),
                 "lo_factor": (_NUM, 10.0)},
    "time": {"T": (_NUM + (type(None),), None), "T_cfl": (_NUM + (type(None),), None),
             "dt": (_NUM + (type(None),), None), "dt_cfl": (_NUM + (type(None),), None),
             "snapshots": ((list,), [])},
    "scheme": {"type": ((str,), "SI"), "transport": ((str,), "implicit"), "update_velocity": ((bool,), True),
               "outer_tol": (_NUM, 1e-4), "outer_cap": ((int,), 50)},
    "newton": {"strategy": ((str,), "inflection"), "eta": (_NUM, 1e-6), "max_iterations": ((int,), 100),
               "relax": (_NUM, 0.5), "delta0": (_NUM, 1.0)},
    "output": {"dir": ((str,), "out"), "write_snapshots": ((bool,), True)},
}

_CHOICES = {
    ("units", "system"): ("dimensionless", "physical"),
    ("permeability", "source"): ("gaussian", "channel", "file", "constant"),
    ("permeability", "format"): ("field", "spe10"),
    ("boundary", "type"): ("inflow", "pressure_drop", "closed"),
    ("velocity", "backend"): ("fine", "mrcm"),
    ("velocity", "spaces"): ("P0", "P1", "physics", "full"),
    ("velocity", "alpha"): ("uniform", "adaptive"),
    ("scheme", "type"): ("SI", "SFI"),
    ("scheme", "transport"): ("implicit", "explicit"),
    ("newton", "strategy"): ("plain", "under_relax", "inflection", "dogleg", "reflective"),
}


def _check_type(path: str, value, types):
    # bool is an int subclass; do not let True pass as a number
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, "
                          f"got {type(value).__name__} ({value!r})")


def _as_float(value):
    # YAML 1.1 reads "1.0e2" (no exponent sign) as a string; ints become floats
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def validate(raw: dict) -> dict:
    """Return a defaults-filled copy of ``raw`` or raise ``ConfigError``."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    out: dict = {}
    top = SCHEMA[""]
    for key, value in raw.items():
        if key in top:
            _check_type(key, value, top[key][0])
            out[key] = value
        elif key not in SCHEMA:
            raise ConfigError(f"unknown section or key {key!r}; known: "
                              f"{sorted(k for k in SCHEMA if k) + sorted(top)}")
    for key, (_, default) in top.items():
        out.setdefault(key, default)
    for sec, keys in SCHEMA.items():
        if not sec:
            continue
        given = raw.get(sec, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected a mapping")
        filled = {}
        for key, value in given.items():
            if key not in keys:
                raise ConfigError(f"{sec}.{key}: unknown key; allowed: {sorted(keys)}")
            # numbers are stored as floats so that 1 and 1.0 hash identically
            if float in keys[key][0]:
                value = _as_float(value)
            _check_type(f"{sec}.{key}", value, keys[key][0])
            filled[key] = value
        for key, (_, default) in keys.items():
            if key not in filled:
                if default is _REQ:
                    raise ConfigError(f"{sec}.{key}: required")
                filled[key] = copy.deepcopy(default)
        out[sec] = filled
    for (sec, key), allowed in _CHOICES.items():
        if out[sec][key] not in allowed:
            raise ConfigError(f"{sec}.{key}: {out[sec][key]!r} not one of {allowed}")
    _semantic_checks(out)
    return out


def _semantic_checks(c: dict):
    g = c["grid"]
    if g["nx"] < 1 or g["ny"] < 1 or not (g["lx"] > 0 and g["ly"] > 0):
        raise ConfigError("grid: need nx, ny >= 1 and positive extents")
    t = c["time"]
    if (t["T"] is None) == (t["T_cfl"] is None):
        raise ConfigError("time: give exactly one of T (PVI) or T_cfl (CFL multiple)")
    if (t["dt"] is None) == (t["dt_cfl"] is None):
        raise ConfigError("time: give exactly one of dt (PVI) or dt_cfl (CFL multiple)")
    f = c["fluid"]
    if (f["mu_w"] is None) != (f["mu_o"] is None):
        raise ConfigError("fluid: give both mu_w and mu_o, or M alone")
    if c["permeability"]["source"] == "file" and not c["permeability"]["path"]:
        raise ConfigError("permeability.path: required when source is 'file'")
    for i, reg in enumerate(c["permeability"]["regions"]):
        if not (isinstance(reg, list) and len(reg) == 5):
            raise ConfigError(f"permeability.regions[{i}]: expected [x0, x1, y0, y1, factor]")
    for i, w in enumerate(c["wells"]["list"]):
        if not (isinstance(w, dict) and set(w) == {"cell", "rate"} and len(w["cell"]) == 2):
            raise ConfigError(f"wells.list[{i}]: expected {{cell: [i, j], rate: r}}")
    if len(c["velocity"]["decomposition"]) != 2:
        raise ConfigError("velocity.decomposition: expected [mx, my]")


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return cls(validate(raw))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        try:
            return cls.from_dict(raw or {})
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def with_overrides(self, **sections) -> "RunConfig":
        """Return a new config; ``sections`` map section -> partial dict (or top-level value)."""
        raw = copy.deepcopy(self.data)
        for sec, val in sections.items():
            if isinstance(val, dict):
                raw.setdefault(sec, {}).update(val)
            else:
                raw[sec] = val
        return RunConfig.from_dict(raw)

    def with_time(self, **time) -> "RunConfig":
        t = dict(self.data["time"])
        for pair in (("T", "T_cfl"), ("dt", "dt_cfl")):
            if any(k in time for k in pair):
                for k in pair:
                    t[k] = None
        t.update(time)
        return self.with_overrides(time=t)

    @property
    def seed(self) -> int:
        s = self.data["seed"]
        return self.data["permeability"]["seed"] if s is None else s

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def content_hash(self, exclude: tuple = ("output", "name", "description")) -> str:
        d = {k: v for k, v in self.data.items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=repr).encode()).hexdigest()
