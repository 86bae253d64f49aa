"""SE(2) exp/log and iterative Lie-algebraic motion averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyEdgeSet, RankDeficient
from .motion import Motion2D, wrap_angle
from .pairwise import RelativeMotionEstimate

log = logging.getLogger(__name__)

SERIES_SWITCH = 1e-6


@dataclass(frozen=True)
class Se2Vector:
    omega: float
    u1: float
    u2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.omega, self.u1, self.u2)):
            raise ValueError("Se2Vector components must be finite")


def vec(x: Se2Vector) -> np.ndarray:
    return np.array([x.omega, x.u1, x.u2])


def rvec(v) -> Se2Vector:
    return Se2Vector(float(v[0]), float(v[1]), float(v[2]))


def _v_coeffs(theta: float) -> tuple[float, float]:
    """``(a, b)`` with ``V(theta) = [[a, -b], [b, a]]``."""
    if abs(theta) <= SERIES_SWITCH:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, theta / 2.0 - theta * t2 / 24.0
    half = 0.5 * theta
    return math.sin(theta) / theta, 2.0 * math.sin(half) ** 2 / theta


def se2_log(m: Motion2D) -> Se2Vector:
    a, b = _v_coeffs(m.theta)
    det = a * a + b * b
    u1 = (a * m.tx + b * m.ty) / det
    u2 = (-b * m.tx + a * m.ty) / det
    return Se2Vector(m.theta, u1, u2)


def se2_exp(v: Se2Vector) -> Motion2D:
    a, b = _v_coeffs(v.omega)
    return Motion2D(wrap_angle(v.omega), a * v.u1 - b * v.u2, b * v.u1 + a * v.u2)


def hat(v: Se2Vector) -> np.ndarray:
    """3x3 Lie-algebra matrix with a skew-symmetric (zero-diagonal) rotation block."""
    return np.array([[0.0, -v.omega, v.u1], [v.omega, 0.0, v.u2], [0.0, 0.0, 0.0]])


@dataclass
class StackedSystem:
    d: np.ndarray
    v: np.ndarray
    edges: tuple[tuple[int, int], ...] = ()


def build_system(
    reliable_edges: Sequence[RelativeMotionEstimate], current_globals: Sequence[Motion2D], n_maps: int
) -> StackedSystem:
    """Stack the residual logs ``log(M_i M_ij M_j^-1)`` against ``+I`` at j, ``-I`` at i."""
    if not reliable_edges:
        raise EmptyEdgeSet("no reliable edges to average")
    r = len(reliable_edges)
    d = np.zeros((3 * r, 3 * (n_maps - 1)))
    v = np.zeros(3 * r)
    eye = np.eye(3)
    for row, e in enumerate(reliable_edges):
        resid = current_globals[e.i] @ e.motion @ current_globals[e.j].inverse()
        v[3 * row : 3 * row + 3] = vec(se2_log(resid))
        if e.j > 0:
            d[3 * row : 3 * row + 3, 3 * (e.j - 1) : 3 * e.j] = eye
        if e.i > 0:
            d[3 * row : 3 * row + 3, 3 * (e.i - 1) : 3 * e.i] = -eye
    return StackedSystem(d, v, tuple((e.i, e.j) for e in reliable_edges))


def solve_increments(system: StackedSystem) -> np.ndarray:
    """Least-squares increments via the pseudo-inverse (SVD-based ``lstsq``)."""
    n_cols = system.d.shape[1]
    if n_cols == 0:
        return np.zeros(0)
    sol, _, rank, _ = np.linalg.lstsq(system.d, system.v, rcond=None)
    if rank < n_cols:
        raise RankDeficient(f"indicator matrix has rank {rank} < {n_cols}; edges do not span")
    return sol


@dataclass
class AveragingResult:
    global_motions: list[Motion2D]
    converged: bool
    sweeps: int
    increment_norms: list[float]


def motion_average(
    init_globals: Sequence[Motion2D],
    reliable_edges: Sequence[RelativeMotionEstimate],
    epsilon: float = 1e-10,
    max_sweeps: int = 100,
) -> AveragingResult:
    """Refine global motions until the stacked increment norm drops below ``epsilon``.

    All maps are updated from the same pre-sweep estimates; map 0 stays fixed.
    """
    globals_ = list(init_globals)
    n = len(globals_)
    norms: list[float] = []
    if n == 1:
        return AveragingResult(globals_, True, 0, norms)
    for sweep in range(1, max_sweeps + 1):
        inc = solve_increments(build_system(reliable_edges, globals_, n))
        norm = float(np.linalg.norm(inc))
        norms.append(norm)
        if norm < epsilon:
            return AveragingResult(globals_, True, sweep, norms)
        globals_ = [globals_[0]] + [
            se2_exp(rvec(inc[3 * (k - 1) : 3 * k])) @ globals_[k] for k in range(1, n)
        ]
    log.warning("motion averaging stopped after %d sweeps (|increment| = %.3g)", max_sweeps, norms[-1])
    return AveragingResult(globals_, False, max_sweeps, norms)
