"""Error measures used by the convergence studies."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..mesh import FaceField


def saturation_error(s, s_ref) -> float:
    """Relative L1 error ``||s - s_ref||_1 / ||s_ref||_1`` (cell sums; uniform cells)."""
    s, r = np.asarray(s, float), np.asarray(s_ref, float)
    if s.shape != r.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {r.shape}")
    den = np.abs(r).sum()
    num = np.abs(s - r).sum()
    return float(num / den) if den > 0 else float(num)


def flux_error(u: FaceField, u_ref: FaceField) -> float:
    """Relative L2 error over all faces."""
    d = (u - u_ref).l2()
    den = u_ref.l2()
    return float(d / den) if den > 0 else float(d)


def saturation_error_series(series, ref_series) -> np.ndarray:
    """Per-time L1 differences normalized by the largest reference L1 norm over time."""
    if len(series) != len(ref_series):
        raise ValueError("time series lengths differ")
    if not len(series):
        return np.zeros(0)
    scale = max(float(np.abs(np.asarray(r)).sum()) for r in ref_series)
    errs = np.array([np.abs(np.asarray(a) - np.asarray(b)).sum() for a, b in zip(series, ref_series)])
    return errs / scale if scale > 0 else errs


def flux_error_series(series, ref_series) -> np.ndarray:
    if len(series) != len(ref_series):
        raise ValueError("time series lengths differ")
    return np.array([flux_error(a, b) for a, b in zip(series, ref_series)])


@dataclass
class ErrorReport:
    saturation_l1: float
    flux_l2: float = float("nan")
    saturation_series: list = field(default_factory=list)
    flux_series: list = field(default_factory=list)
    times: list = field(default_factory=list)

    @classmethod
    def compare(cls, s, s_ref, u=None, u_ref=None, snaps=(), ref_snaps=(), times=(),
                vels=(), ref_vels=()) -> "ErrorReport":
        fl = flux_error(u, u_ref) if u is not None and u_ref is not None else float("nan")
        return cls(saturation_error(s, s_ref), fl,
                   list(saturation_error_series(snaps, ref_snaps)) if len(snaps) else [],
                   list(flux_error_series(vels, ref_vels)) if len(vels) else [],
                   list(times))

    def write_csv(self, path) -> Path:
        """Columns ``metric,time,value``; summary rows use an empty time."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "time", "value"])
            w.writerow(["saturation_l1", "", repr(self.saturation_l1)])
            w.writerow(["flux_l2", "", repr(self.flux_l2)])
            for t, v in zip(self.times, self.saturation_series):
                w.writerow(["saturation_l1_series", repr(t), repr(float(v))])
            for t, v in zip(self.times, self.flux_series):
                w.writerow(["flux_l2_series", repr(t), repr(float(v))])
        return path

    def as_dict(self) -> dict:
        return asdict(self)
