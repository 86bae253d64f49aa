"""Synthetic floorplans cut into rotated, noisy submaps with known motions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InfeasibleParams
from .gridmap import CellState, OccupancyGrid
from .motion import Motion2D


@dataclass
class SynthParams:
    world_size: int = 400
    room_count: int = 14
    room_size: tuple[int, int] = (24, 70)
    corridor_width: int = 8
    wall_thickness: int = 2
    clutter_per_room: int = 3
    n_maps: int = 6
    window_size: int = 160
    min_overlap: float = 0.30
    max_overlap: float = 0.70
    noise: float = 0.01
    rotation_range: float = math.pi
    resolution: float = 0.05
    # explicit window corners (x0, y0) in world cells; bypasses placement
    windows: list[tuple[int, int]] | None = None
    max_attempts: int = 1000


@dataclass
class SynthWorld:
    world: OccupancyGrid
    windows: list[tuple[int, int]]
    motions: list[Motion2D]
    params: SynthParams = field(repr=False)


def _draw_floorplan(p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    n = p.world_size
    free = np.zeros((n, n), dtype=bool)
    margin = p.wall_thickness + 4
    rooms = []
    for _ in range(50 * p.room_count):
        if len(rooms) == p.room_count:
            break
        w, h = rng.integers(p.room_size[0], p.room_size[1] + 1, size=2)
        x = int(rng.integers(margin, n - margin - w))
        y = int(rng.integers(margin, n - margin - h))
        # keep a wall-width gap between rooms so each stays a distinct shape
        gap = p.wall_thickness + 2
        if any(x < rx + rw + gap and rx < x + w + gap and y < ry + rh + gap and ry < y + h + gap for rx, ry, rw, rh in rooms):
            continue
        rooms.append((x, y, int(w), int(h)))
    for x, y, w, h in rooms:
        free[y : y + h, x : x + w] = True

    # corridors: L-shaped links along a chain ordered by position, plus a few shortcuts
    centers = [(x + w // 2, y + h // 2) for x, y, w, h in rooms]
    order = sorted(range(len(rooms)), key=lambda i: (centers[i][0] + centers[i][1]))
    links = list(zip(order[:-1], order[1:]))
    for _ in range(max(1, len(rooms) // 4)):
        a, b = rng.choice(len(rooms), size=2, replace=False)
        links.append((int(a), int(b)))
    half = p.corridor_width // 2
    for a, b in links:
        (xa, ya), (xb, yb) = centers[a], centers[b]
        if rng.random() < 0.5:
            free[ya - half : ya + half, min(xa, xb) : max(xa, xb) + 1] = True
            free[min(ya, yb) : max(ya, yb) + 1, xb - half : xb + half] = True
        else:
            free[min(ya, yb) : max(ya, yb) + 1, xa - half : xa + half] = True
            free[yb - half : yb + half, min(xa, xb) : max(xa, xb) + 1] = True

    wall = ndimage.binary_dilation(free, structure=np.ones((3, 3), bool), iterations=p.wall_thickness) & ~free
    cells = np.full((n, n), CellState.UNKNOWN, dtype=np.uint8)
    cells[free] = CellState.FREE
    cells[wall] = CellState.OCCUPIED

    # furniture: small occupied blocks inside rooms
    for x, y, w, h in rooms:
        for _ in range(p.clutter_per_room):
            bw, bh = rng.integers(2, 7, size=2)
            if w <= bw + 6 or h <= bh + 6:
                continue
            bx = int(rng.integers(x + 3, x + w - bw - 3))
            by = int(rng.integers(y + 3, y + h - bh - 3))
            cells[by : by + bh, bx : bx + bw] = CellState.OCCUPIED
    return cells


def _overlap_fraction(a: tuple[int, int], b: tuple[int, int], size: int) -> float:
    dx = max(0, size - abs(a[0] - b[0]))
    dy = max(0, size - abs(a[1] - b[1]))
    return dx * dy / float(size * size)


def _place_windows(cells: np.ndarray, p: SynthParams, rng: np.random.Generator) -> list[tuple[int, int]]:
    n, s = p.world_size, p.window_size
    if s > n:
        raise InfeasibleParams(f"window size {s} exceeds world size {n}")
    structured = cells != CellState.UNKNOWN
    integral = np.pad(structured.cumsum(0).cumsum(1), ((1, 0), (1, 0)))

    def content(x, y):
        return (integral[y + s, x + s] - integral[y, x + s] - integral[y + s, x] + integral[y, x]) / (s * s)

    windows: list[tuple[int, int]] = []
    attempts = 0
    while len(windows) < p.n_maps:
        attempts += 1
        if attempts > p.max_attempts:
            raise InfeasibleParams(
                f"placed {len(windows)} of {p.n_maps} windows in {p.max_attempts} attempts"
            )
        x, y = (int(v) for v in rng.integers(0, n - s + 1, size=2))
        if content(x, y) < 0.35:
            continue
        if windows:
            overlaps = [_overlap_fraction((x, y), w, s) for w in windows]
            if max(overlaps) < p.min_overlap or max(overlaps) > p.max_overlap:
                continue
        windows.append((x, y))
    return windows


def _window_to_world(window: tuple[int, int], size: int, phi: float, canvas: int) -> Motion2D:
    """Motion taking submap cell coordinates to world cell coordinates."""
    if canvas == size and phi == 0.0:
        return Motion2D(0.0, window[0], window[1])
    center = np.array([window[0] + size / 2.0, window[1] + size / 2.0])
    c, s = math.cos(phi), math.sin(phi)
    off = np.array([canvas / 2.0, canvas / 2.0])
    t = center - np.array([c * off[0] - s * off[1], s * off[0] + c * off[1]])
    return Motion2D(phi, t[0], t[1])


def _rasterize(world: np.ndarray, window: tuple[int, int], size: int, to_world: Motion2D, canvas: int) -> np.ndarray:
    cols, rows = np.meshgrid(np.arange(canvas) + 0.5, np.arange(canvas) + 0.5)
    pts = to_world.apply(np.column_stack([cols.ravel(), rows.ravel()]))
    wx = np.floor(pts[:, 0]).astype(np.int64)
    wy = np.floor(pts[:, 1]).astype(np.int64)
    inside = (wx >= window[0]) & (wx < window[0] + size) & (wy >= window[1]) & (wy < window[1] + size)
    out = np.full(canvas * canvas, CellState.UNKNOWN, dtype=np.uint8)
    out[inside] = world[wy[inside], wx[inside]]
    return out.reshape(canvas, canvas)


def _flip_noise(cells: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    if prob <= 0:
        return cells
    flip = rng.random(cells.shape) < prob
    out = cells.copy()
    out[flip & (cells == CellState.OCCUPIED)] = CellState.FREE
    out[flip & (cells == CellState.FREE)] = CellState.OCCUPIED
    return out


def generate_synthetic(params: SynthParams | None = None, seed: int = 0) -> tuple[SynthWorld, list[OccupancyGrid]]:
    """Draw a floorplan and cut ``n_maps`` submaps with ground-truth global motions.

    Submap 0 is the reference (identity). Submap k's ground truth maps its
    cell coordinates into submap 0's cell coordinates.
    """
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    world = _draw_floorplan(p, rng)
    windows = list(p.windows) if p.windows is not None else _place_windows(world, p, rng)
    if len(windows) != p.n_maps:
        raise InfeasibleParams("explicit windows must match n_maps")

    s = p.window_size
    canvas = s if p.rotation_range == 0 else int(math.ceil(s * math.sqrt(2))) + 2
    to_world = []
    maps = []
    for k, win in enumerate(windows):
        phi = 0.0 if k == 0 or p.rotation_range == 0 else float(rng.uniform(-p.rotation_range, p.rotation_range))
        size_k = s if k == 0 else canvas
        m = _window_to_world(win, s, phi, size_k)
        cells = _rasterize(world, win, s, m, size_k)
        cells = _flip_noise(cells, p.noise, rng)
        to_world.append(m)
        maps.append(OccupancyGrid(cells, p.resolution, name=f"map_{k:02d}"))

    ref_inv = to_world[0].inverse()
    motions = [Motion2D.identity()] + [ref_inv @ m for m in to_world[1:]]
    return SynthWorld(OccupancyGrid(world, p.resolution), windows, motions, p), maps
