"""Permeability fields and the quadratic relative-permeability closures."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .mesh import CartesianGrid, DimensionError


class SaturationDomainError(ValueError):
    pass


class PermParseError(ValueError):
    pass


_S_SLACK = 1e-12


def _check_saturation(s):
    s = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s < -_S_SLACK) or np.any(s > 1.0 + _S_SLACK):
        bad = s[(~np.isfinite(s)) | (s < -_S_SLACK) | (s > 1.0 + _S_SLACK)]
        raise SaturationDomainError(f"saturation outside [0, 1]: {bad.ravel()[:5]}")
    return np.clip(s, 0.0, 1.0)


@dataclass(frozen=True)
class FluidProps:
    mu_w: float = 1.0
    mu_o: float = 10.0
    rho_w: float = 1.0
    rho_o: float = 1.0

    def __post_init__(self):
        for name in ("mu_w", "mu_o", "rho_w", "rho_o"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def from_ratio(cls, M: float, rho_w: float = 1.0, rho_o: float = 1.0) -> "FluidProps":
        """Dimensionless fluids: water viscosity 1, oil viscosity ``M``."""
        return cls(1.0, float(M), rho_w, rho_o)

    @property
    def M(self) -> float:
        return self.mu_o / self.mu_w


def fractional_flow(s, M: float):
    """Return ``(f, f', f'')`` for ``f(s) = M s^2 / (M s^2 + (1-s)^2)``."""
    s = _check_saturation(s)
    return _frac_flow(s, M)


def _frac_flow(s, M):
    one = 1.0 - s
    D = M * s * s + one * one
    dD = 2.0 * M * s - 2.0 * one
    f = M * s * s / D
    df = 2.0 * M * s * one / (D * D)
    d2f = 2.0 * M * ((1.0 - 2.0 * s) * D - 2.0 * s * one * dD) / D ** 3
    return f, df, d2f


def mobilities(s, props: FluidProps):
    """Return ``(lam_w, lam_o, lam_total, lam_gravity)``."""
    s = _check_saturation(s)
    lw = s * s / props.mu_w
    lo = (1.0 - s) ** 2 / props.mu_o
    return lw, lo, lw + lo, lw * props.rho_w + lo * props.rho_o


def mobility_derivatives(s, props: FluidProps):
    """Return ``(dlam_w/ds, dlam_o/ds)``."""
    s = _check_saturation(s)
    return 2.0 * s / props.mu_w, -2.0 * (1.0 - s) / props.mu_o


def total_mobility(s, props: FluidProps):
    return mobilities(s, props)[2]


def inflection_point(M: float) -> float:
    """Unique zero of ``f''`` in (0, 1).

    The numerator of ``f''`` reduces to ``2(M+1)s^3 - 3(M+1)s^2 + 1``, which
    is strictly decreasing on (0, 1) from 1 to ``-M``.
    """
    if not M > 0:
        raise ValueError(f"viscosity ratio must be positive, got {M}")
    c = M + 1.0
    return brentq(lambda s: 2.0 * c * s ** 3 - 3.0 * c * s ** 2 + 1.0, 0.0, 1.0, xtol=1e-15, rtol=1e-15)


@lru_cache(maxsize=64)
def max_df(M: float, samples: int = 20001) -> float:
    """``max_s f'(s)`` by dense sampling (refined around the sampled peak)."""
    s = np.linspace(0.0, 1.0, samples)
    df = _frac_flow(s, M)[1]
    k = int(np.argmax(df))
    lo, hi = s[max(k - 1, 0)], s[min(k + 1, samples - 1)]
    fine = np.linspace(lo, hi, 2001)
    return float(max(df.max(), _frac_flow(fine, M)[1].max()))


# ---------------------------------------------------------------------------
# Permeability fields
# ---------------------------------------------------------------------------

def gen_gaussian_field(grid: CartesianGrid, seed: int, scale_exponent: float = 4.5,
                       std: float = 0.45) -> np.ndarray:
    """Log-normal permeability ``exp(scale_exponent * xi)``.

    ``xi`` is a stationary Gaussian field sampled at cell centres by circulant
    embedding of the covariance ``|x - y|^(-1/2)`` on a doubled periodic grid
    (the singular zero lag takes the nearest-neighbour value; negative
    embedding eigenvalues are dropped). The sample is shifted to zero mean and
    scaled to standard deviation ``std``.
    """
    ny, nx = grid.shape
    my, mx = 2 * ny, 2 * nx
    lag_x = np.minimum(np.arange(mx), mx - np.arange(mx)) * grid.dx
    lag_y = np.minimum(np.arange(my), my - np.arange(my)) * grid.dy
    r = np.hypot(lag_x[None, :], lag_y[:, None])
    r[0, 0] = min(grid.dx, grid.dy)
    cov = r ** -0.5
    eig = np.fft.fft2(cov).real
    eig = np.clip(eig, 0.0, None)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((my, mx)) + 1j * rng.standard_normal((my, mx))
    sample = np.fft.fft2(np.sqrt(eig / (mx * my)) * z).real[:ny, :nx]
    xi = sample - sample.mean()
    sd = xi.std()
    if sd > 0:
        xi = xi * (std / sd)
    return np.exp(scale_exponent * xi)


@dataclass(frozen=True)
class ChannelSpec:
    """Axis-aligned rectangles ``(x0, x1, y0, y1, factor)`` multiplying a background value."""

    regions: tuple[tuple[float, float, float, float, float], ...] = field(default_factory=tuple)
    background: float = 1.0

    def __post_init__(self):
        if not self.background > 0:
            raise ValueError("background permeability must be positive")
        for reg in self.regions:
            if len(reg) != 5 or not reg[4] > 0 or reg[0] > reg[1] or reg[2] > reg[3]:
                raise ValueError(f"bad channel region {reg}")


def channel_field(grid: CartesianGrid, spec: ChannelSpec) -> np.ndarray:
    X, Y = grid.cell_centers()
    x_lo, y_lo = grid.origin
    for x0, x1, y0, y1, _ in spec.regions:
        if x0 < x_lo - 1e-12 or y0 < y_lo - 1e-12 or x1 > x_lo + grid.lx + 1e-12 \
                or y1 > y_lo + grid.ly + 1e-12:
            raise ValueError(f"channel region {(x0, x1, y0, y1)} leaves the domain")
    K = np.full(grid.shape, float(spec.background))
    for x0, x1, y0, y1, factor in spec.regions:
        K[(X > x0) & (X < x1) & (Y > y0) & (Y < y1)] *= factor
    return K


def load_perm_ascii(path, nx: int, ny: int, layer: int = 0, transpose: bool = False) -> np.ndarray:
    """Read one layer of a whitespace-separated permeability file.

    Values are stored x-fastest, layers concatenated. With ``transpose`` the
    file is read as an ``ny x nx`` (x-fastest) layer and transposed, which is
    how the 60 x 220 SPE10 layers map onto a 220 x 60 grid.
    """
    if nx < 1 or ny < 1 or layer < 0:
        raise DimensionError(f"bad layer request nx={nx} ny={ny} layer={layer}")
    n = nx * ny
    start, stop = layer * n, (layer + 1) * n
    values = np.empty(n)
    k = 0
    with Path(path).open() as fh:
        for line in fh:
            for tok in line.split():
                if k >= stop:
                    break
                if k >= start:
                    try:
                        v = float(tok)
                    except ValueError:
                        raise PermParseError(f"{path}: entry {k} is not a number: {tok!r}") from None
                    if not (np.isfinite(v) and v > 0):
                        raise PermParseError(f"{path}: entry {k} is not positive: {tok!r}")
                    values[k - start] = v
                k += 1
            if k >= stop:
                break
    if k < stop:
        raise PermParseError(f"{path}: file ends after {k} entries; missing entry {k} "
                             f"(layer {layer} needs entries {start}..{stop - 1})")
    if transpose:
        return values.reshape(nx, ny).T.copy()
    return values.reshape(ny, nx)


def write_perm_ascii(path, fields, per_line: int = 6) -> None:
    with Path(path).open("w") as fh:
        for K in fields:
            flat = np.asarray(K, dtype=float).ravel()
            for i in range(0, flat.size, per_line):
                fh.write(" ".join(repr(float(v)) for v in flat[i:i + per_line]) + "\n")
