"""Occupancy grids: PGM + JSON sidecar I/O, edge points, fused rendering."""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInput, FormatError, ResolutionMismatch
from .motion import Motion2D

DEFAULT_OCCUPIED_MAX = 50
DEFAULT_FREE_MIN = 200


class CellState(enum.IntEnum):
    OCCUPIED = 0
    FREE = 1
    UNKNOWN = 2


# canonical output bytes, indexed by CellState value
CANONICAL_BYTES = np.array([0, 254, 205], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Trinary raster of shape ``(height, width)``, row-major.

    ``origin`` is the position (in cells) of the grid's lower corner in the
    frame it was rendered into; input maps keep the default ``(0, 0)``.
    """

    cells: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    occupied_max: int = DEFAULT_OCCUPIED_MAX
    free_min: int = DEFAULT_FREE_MIN
    name: str = field(default="", compare=False)

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise ValueError("cells must be a 2-D array")
        if not np.isin(cells, (0, 1, 2)).all():
            raise ValueError("cells must hold CellState values")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        cells = cells.astype(np.uint8, copy=True)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "resolution", float(self.resolution))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.cells.shape == other.cells.shape
            and bool(np.array_equal(self.cells, other.cells))
            and self.resolution == other.resolution
            and self.origin == other.origin
        )

    def count(self, state: CellState) -> int:
        return int(np.count_nonzero(self.cells == state))

    @classmethod
    def from_states(cls, states: Sequence[Sequence[CellState]], resolution: float = 0.05) -> OccupancyGrid:
        return cls(np.array(states, dtype=np.uint8), resolution)


def decode_bytes(raw: np.ndarray, occupied_max: int, free_min: int) -> np.ndarray:
    """Threshold raw bytes into cell states.

    The canonical unknown byte (205) always decodes as Unknown; otherwise it
    would fall on the free side of the default threshold and break round trips.
    """
    cells = np.full(raw.shape, CellState.UNKNOWN, dtype=np.uint8)
    cells[raw <= occupied_max] = CellState.OCCUPIED
    cells[(raw >= free_min) & (raw != CANONICAL_BYTES[CellState.UNKNOWN])] = CellState.FREE
    return cells


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(data: bytes, path: Path) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"{path}: malformed PGM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing raster separator")
    payload = data[pos + 1 :]
    if len(payload) != width * height:
        raise FormatError(
            f"{path}: pixel payload has {len(payload)} bytes, expected {width * height}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def _read_sidecar(path: Path) -> dict:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise FormatError(f"{path}: missing metadata sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise FormatError(f"{meta_path}: sidecar must be a JSON object")
    try:
        resolution = float(meta["resolution"])
        occupied_max = int(meta.get("occupied_max", DEFAULT_OCCUPIED_MAX))
        free_min = int(meta.get("free_min", DEFAULT_FREE_MIN))
        origin = meta.get("origin_cells", [0.0, 0.0])
        origin = (float(origin[0]), float(origin[1]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"{meta_path}: invalid sidecar field ({exc})") from None
    if not (resolution > 0 and math.isfinite(resolution)):
        raise FormatError(f"{meta_path}: resolution must be positive")
    if not 0 <= occupied_max < free_min <= 255:
        raise FormatError(f"{meta_path}: need 0 <= occupied_max < free_min <= 255")
    return dict(resolution=resolution, occupied_max=occupied_max, free_min=free_min, origin=origin)


def load_grid(path) -> OccupancyGrid:
    """Read ``<stem>.pgm`` and its ``<stem>.json`` sidecar.

    Raises ``OSError`` when the file cannot be read and ``FormatError`` on a
    malformed raster or sidecar.
    """
    path = Path(path)
    data = path.read_bytes()
    raw = _parse_pgm(data, path)
    meta = _read_sidecar(path)
    cells = decode_bytes(raw, meta["occupied_max"], meta["free_min"])
    return OccupancyGrid(
        cells,
        meta["resolution"],
        origin=meta["origin"],
        occupied_max=meta["occupied_max"],
        free_min=meta["free_min"],
        name=path.stem,
    )


def save_grid(grid: OccupancyGrid, path) -> None:
    path = Path(path)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    path.write_bytes(header + CANONICAL_BYTES[grid.cells].tobytes())
    meta = {
        "resolution": grid.resolution,
        "occupied_max": grid.occupied_max,
        "free_min": grid.free_min,
    }
    if grid.origin != (0.0, 0.0):
        meta["origin_cells"] = list(grid.origin)
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def edge_mask(cells: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one Free 4-neighbour."""
    free = cells == CellState.FREE
    near_free = np.zeros_like(free)
    near_free[1:, :] |= free[:-1, :]
    near_free[:-1, :] |= free[1:, :]
    near_free[:, 1:] |= free[:, :-1]
    near_free[:, :-1] |= free[:, 1:]
    return (cells == CellState.OCCUPIED) & near_free


def extract_edge_points(grid: OccupancyGrid) -> np.ndarray:
    """Edge points as an ``(n, 2)`` array of cell-centre ``(x, y)`` in row-major order."""
    rows, cols = np.nonzero(edge_mask(grid.cells))
    return np.column_stack([cols + 0.5, rows + 0.5]).astype(float)


def _check_resolutions(grids: Sequence[OccupancyGrid]) -> float:
    if not grids:
        raise EmptyInput("no grids given")
    res = grids[0].resolution
    for g in grids[1:]:
        if not math.isclose(g.resolution, res, rel_tol=1e-9):
            raise ResolutionMismatch(f"resolutions differ: {res} vs {g.resolution}")
    return res


def merged_bounds(grids: Sequence[OccupancyGrid], motions: Sequence[Motion2D]) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, x1, y1)`` covering every transformed grid plus a 1-cell margin."""
    corners = []
    for g, m in zip(grids, motions):
        c = np.array([[0, 0], [g.width, 0], [0, g.height], [g.width, g.height]], dtype=float)
        corners.append(m.apply(c))
    pts = np.vstack(corners)
    # round before floor/ceil so identity extents do not grow from float noise
    lo = np.floor(np.round(pts.min(axis=0), 9)).astype(int) - 1
    hi = np.ceil(np.round(pts.max(axis=0), 9)).astype(int) + 1
    return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])


def render_merged(grids: Sequence[OccupancyGrid], motions: Sequence[Motion2D]) -> OccupancyGrid:
    """Fuse grids placed by their global motions into one grid.

    Every output cell takes nearest-neighbour samples from each input at the
    inverse-transformed cell centre and fuses them with precedence
    Occupied > Free > Unknown.
    """
    res = _check_resolutions(grids)
    if len(motions) != len(grids):
        raise ValueError("need exactly one motion per grid")
    x0, y0, x1, y1 = merged_bounds(grids, motions)
    w, h = x1 - x0, y1 - y0
    xs = np.arange(w) + x0 + 0.5
    ys = np.arange(h) + y0 + 0.5
    gx, gy = np.meshgrid(xs, ys)
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    any_occ = np.zeros(w * h, dtype=bool)
    any_free = np.zeros(w * h, dtype=bool)
    for g, m in zip(grids, motions):
        local = m.inverse().apply(centers)
        col = np.floor(local[:, 0]).astype(np.int64)
        row = np.floor(local[:, 1]).astype(np.int64)
        inside = (col >= 0) & (col < g.width) & (row >= 0) & (row < g.height)
        states = np.full(w * h, CellState.UNKNOWN, dtype=np.uint8)
        states[inside] = g.cells[row[inside], col[inside]]
        any_occ |= states == CellState.OCCUPIED
        any_free |= states == CellState.FREE

    out = np.full(w * h, CellState.UNKNOWN, dtype=np.uint8)
    out[any_free] = CellState.FREE
    out[any_occ] = CellState.OCCUPIED
    return OccupancyGrid(out.reshape(h, w), res, origin=(float(x0), float(y0)))
