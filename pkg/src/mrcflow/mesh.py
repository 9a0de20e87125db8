"""Structured 2D grids, face fields and the block decomposition skeleton.

Cell-centred quantities are plain ``numpy`` arrays of shape ``(ny, nx)``;
flattening them in C order gives the canonical x-fastest ordering used by
every solver and file format in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class CartesianGrid:
    nx: int
    ny: int
    dx: float
    dy: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if int(self.nx) != self.nx or int(self.ny) != self.ny:
            raise DimensionError(f"cell counts must be integers, got {self.nx}, {self.ny}")
        if self.nx < 1 or self.ny < 1:
            raise DimensionError(f"cell counts must be >= 1, got nx={self.nx}, ny={self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise DimensionError(f"cell sizes must be > 0, got dx={self.dx}, dy={self.dy}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def ncells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy

    @property
    def lx(self) -> float:
        return self.nx * self.dx

    @property
    def ly(self) -> float:
        return self.ny * self.dy

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def x_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.dy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def full(self, value: float) -> np.ndarray:
        return np.full(self.shape, float(value))

    def subgrid(self, i0: int, j0: int, nx: int, ny: int) -> "CartesianGrid":
        return CartesianGrid(nx, ny, self.dx, self.dy,
                             (self.origin[0] + i0 * self.dx, self.origin[1] + j0 * self.dy))


def build_grid(nx, ny, dx, dy, origin=(0.0, 0.0)) -> CartesianGrid:
    return CartesianGrid(nx, ny, dx, dy, origin)


def as_cell_field(grid: CartesianGrid, values) -> np.ndarray:
    """Coerce ``values`` (scalar, flat x-fastest vector or 2D array) to ``(ny, nx)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.shape, float(arr))
    if arr.size != grid.ncells:
        raise DimensionError(f"cell field has {arr.size} values, grid needs {grid.ncells}")
    return arr.reshape(grid.shape)


@dataclass
class FaceField:
    """Normal velocities on the faces of ``grid``.

    ``ux[j, i]`` lives on the vertical face at ``x = x0 + i*dx`` of row ``j``
    (shape ``(ny, nx+1)``); ``uy[j, i]`` on the horizontal face at
    ``y = y0 + j*dy`` of column ``i`` (shape ``(ny+1, nx)``). Positive values
    mean flow towards +x / +y.
    """

    grid: CartesianGrid
    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self):
        g = self.grid
        self.ux = np.asarray(self.ux, dtype=float).reshape(g.ny, g.nx + 1)
        self.uy = np.asarray(self.uy, dtype=float).reshape(g.ny + 1, g.nx)

    @classmethod
    def zeros(cls, grid: CartesianGrid) -> "FaceField":
        return cls(grid, np.zeros((grid.ny, grid.nx + 1)), np.zeros((grid.ny + 1, grid.nx)))

    @classmethod
    def constant(cls, grid: CartesianGrid, ux: float, uy: float) -> "FaceField":
        return cls(grid, np.full((grid.ny, grid.nx + 1), float(ux)),
                   np.full((grid.ny + 1, grid.nx), float(uy)))

    def copy(self) -> "FaceField":
        return FaceField(self.grid, self.ux.copy(), self.uy.copy())

    def scaled(self, factor: float) -> "FaceField":
        return FaceField(self.grid, self.ux * factor, self.uy * factor)

    def __neg__(self) -> "FaceField":
        return self.scaled(-1.0)

    def __sub__(self, other: "FaceField") -> "FaceField":
        return FaceField(self.grid, self.ux - other.ux, self.uy - other.uy)

    def __add__(self, other: "FaceField") -> "FaceField":
        return FaceField(self.grid, self.ux + other.ux, self.uy + other.uy)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ux.ravel(), self.uy.ravel()])

    def max_abs(self) -> float:
        return float(max(np.abs(self.ux).max(), np.abs(self.uy).max()))

    def l2(self) -> float:
        """Face-length weighted L2 norm."""
        g = self.grid
        return float(np.sqrt(g.dx * g.dy * (np.sum(self.ux ** 2) + np.sum(self.uy ** 2))))

    def checksum(self) -> int:
        return hash((self.ux.tobytes(), self.uy.tobytes()))


def divergence(u: FaceField) -> np.ndarray:
    g = u.grid
    flux = (u.ux[:, 1:] - u.ux[:, :-1]) * g.dy + (u.uy[1:, :] - u.uy[:-1, :]) * g.dx
    return flux / g.cell_volume


# ---------------------------------------------------------------------------
# Domain decomposition skeleton
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Subdomain:
    index: int
    bx: int
    by: int
    i0: int
    j0: int
    nx: int
    ny: int

    @property
    def islice(self) -> slice:
        return slice(self.i0, self.i0 + self.nx)

    @property
    def jslice(self) -> slice:
        return slice(self.j0, self.j0 + self.ny)


@dataclass(frozen=True)
class Interface:
    """The shared edge set of two neighbouring subdomains.

    ``normal`` is ``"x"`` for a vertical interface (its fine edges are x-faces)
    and ``"y"`` for a horizontal one. The fixed normal points from ``lower``
    (the smaller subdomain index) into ``upper``, i.e. along +x or +y.
    ``face_index`` is the global face column (``"x"``) or row (``"y"``) and
    ``cells`` the global row/column range of the edges, in ascending
    tangential order.
    """

    index: int
    normal: str
    lower: int
    upper: int
    face_index: int
    start: int
    count: int
    edge_length: float
    H: float
    a: float
    b: float

    @property
    def nedges(self) -> int:
        return self.count

    def midpoints(self) -> np.ndarray:
        return self.a + (np.arange(self.count) + 0.5) * self.edge_length

    def edge_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        left = self.a + np.arange(self.count) * self.edge_length
        return left, left + self.edge_length

    def take(self, u: FaceField) -> np.ndarray:
        """Normal velocities of ``u`` on this interface's edges (along the fixed normal)."""
        if self.normal == "x":
            return u.ux[self.start:self.start + self.count, self.face_index].copy()
        return u.uy[self.face_index, self.start:self.start + self.count].copy()

    def put(self, u: FaceField, values) -> None:
        if self.normal == "x":
            u.ux[self.start:self.start + self.count, self.face_index] = values
        else:
            u.uy[self.face_index, self.start:self.start + self.count] = values

    def cell_pairs(self) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        """Global ``(j, i)`` index arrays of the cells below/left and above/right of each edge."""
        t = np.arange(self.start, self.start + self.count)
        if self.normal == "x":
            lo = (t, np.full(self.count, self.face_index - 1))
            hi = (t, np.full(self.count, self.face_index))
        else:
            lo = (np.full(self.count, self.face_index - 1), t)
            hi = (np.full(self.count, self.face_index), t)
        return lo, hi


@dataclass(frozen=True)
class BoundaryPiece:
    """One interface as seen from a subdomain.

    ``side`` names the local boundary (``left``/``right``/``bottom``/``top``)
    and ``sign`` is the dot product of the fixed interface normal with the
    subdomain's outward normal.
    """

    interface: int
    side: str
    sign: int


@dataclass(frozen=True)
class SkeletonDecomposition:
    grid: CartesianGrid
    mx: int
    my: int
    subdomains: tuple[Subdomain, ...] = field(repr=False)
    interfaces: tuple[Interface, ...] = field(repr=False)
    boundary: tuple[tuple[BoundaryPiece, ...], ...] = field(repr=False)

    @property
    def nsub(self) -> int:
        return self.mx * self.my

    def subdomain_of_cell(self) -> np.ndarray:
        g = self.grid
        sx, sy = g.nx // self.mx, g.ny // self.my
        jj, ii = np.indices(g.shape)
        return (ii // sx) + (jj // sy) * self.mx


def build_decomposition(grid: CartesianGrid, mx: int, my: int) -> SkeletonDecomposition:
    if mx < 1 or my < 1:
        raise DecompositionError(f"subdomain counts must be >= 1, got ({mx}, {my})")
    if grid.nx % mx or grid.ny % my:
        raise DecompositionError(
            f"({mx}, {my}) subdomains do not divide a {grid.nx}x{grid.ny} grid")
    sx, sy = grid.nx // mx, grid.ny // my
    subs = []
    for by in range(my):
        for bx in range(mx):
            subs.append(Subdomain(bx + by * mx, bx, by, bx * sx, by * sy, sx, sy))

    interfaces = []
    pieces: list[list[BoundaryPiece]] = [[] for _ in subs]
    # vertical interfaces first, then horizontal; both in subdomain order
    for by in range(my):
        for bx in range(mx - 1):
            lo, hi = bx + by * mx, bx + 1 + by * mx
            k = len(interfaces)
            interfaces.append(Interface(
                k, "x", lo, hi, (bx + 1) * sx, by * sy, sy, grid.dy, sx * grid.dx,
                grid.origin[1] + by * sy * grid.dy, grid.origin[1] + (by + 1) * sy * grid.dy))
            pieces[lo].append(BoundaryPiece(k, "right", +1))
            pieces[hi].append(BoundaryPiece(k, "left", -1))
    for by in range(my - 1):
        for bx in range(mx):
            lo, hi = bx + by * mx, bx + (by + 1) * mx
            k = len(interfaces)
            interfaces.append(Interface(
                k, "y", lo, hi, (by + 1) * sy, bx * sx, sx, grid.dx, sy * grid.dy,
                grid.origin[0] + bx * sx * grid.dx, grid.origin[0] + (bx + 1) * sx * grid.dx))
            pieces[lo].append(BoundaryPiece(k, "top", +1))
            pieces[hi].append(BoundaryPiece(k, "bottom", -1))
    return SkeletonDecomposition(grid, mx, my, tuple(subs), tuple(interfaces),
                                 tuple(tuple(p) for p in pieces))
