"""Plain-text cell-field files.

Format::

    nx ny dx dy x0 y0
    v(0,0) v(1,0) ... v(nx-1,0)        # row j = 0 (bottom)
    ...
    v(0,ny-1) ...                      # row j = ny-1 (top)

Values are written with 17 significant digits, which round-trips IEEE doubles
exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..mesh import CartesianGrid, build_grid


class FieldParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_field(field, path, grid: CartesianGrid | None = None) -> Path:
    """Write a ``(ny, nx)`` array; the grid defaults to the unit-spaced grid at the origin."""
    a = np.asarray(field, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D cell field, got shape {a.shape}")
    ny, nx = a.shape
    if grid is None:
        grid = build_grid(nx, ny, 1.0, 1.0)
    elif grid.shape != a.shape:
        raise ValueError(f"field shape {a.shape} does not match grid {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join([str(nx), str(ny)] + [_fmt(v) for v in (grid.dx, grid.dy, *grid.origin)])]
    lines += [" ".join(_fmt(v) for v in row) for row in a]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_field(path) -> tuple[np.ndarray, CartesianGrid]:
    """Parse a field file; malformed content raises ``FieldParseError`` naming the line."""
    path = Path(path)
    raw = path.read_text().splitlines()
    # blank trailing lines are tolerated, nothing else is
    while raw and not raw[-1].strip():
        raw.pop()
    if not raw:
        raise FieldParseError(path, 1, "empty file, expected header 'nx ny dx dy x0 y0'")
    head = raw[0].split()
    if len(head) != 6:
        raise FieldParseError(path, 1, f"header needs 6 entries 'nx ny dx dy x0 y0', found {len(head)}")
    try:
        nx, ny = int(head[0]), int(head[1])
        dx, dy, x0, y0 = (float(t) for t in head[2:])
    except ValueError as exc:
        raise FieldParseError(path, 1, f"bad header value ({exc})") from None
    if nx < 1 or ny < 1 or not (dx > 0 and dy > 0):
        raise FieldParseError(path, 1, "header needs nx, ny >= 1 and dx, dy > 0")
    body = raw[1:]
    if len(body) != ny:
        line = len(raw) + 1 if len(body) < ny else ny + 2
        raise FieldParseError(path, line, f"header declares ny={ny} rows but the body has {len(body)}")
    out = np.empty((ny, nx))
    for j, text in enumerate(body):
        toks = text.split()
        if len(toks) != nx:
            raise FieldParseError(path, j + 2, f"expected nx={nx} values, found {len(toks)}")
        try:
            out[j] = [float(t) for t in toks]
        except ValueError as exc:
            raise FieldParseError(path, j + 2, f"bad value ({exc})") from None
    return out, build_grid(nx, ny, dx, dy, (x0, y0))
