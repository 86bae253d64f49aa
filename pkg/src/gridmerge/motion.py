"""SE(2) rigid motions stored as (theta, tx, ty)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Motion2D:
    """Rigid motion ``x -> R(theta) x + t``; translation in cell units."""

    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @classmethod
    def identity(cls) -> Motion2D:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Motion2D:
        # atan2 re-projects onto SO(2) even if m drifted slightly
        return cls(math.atan2(m[1, 0], m[0, 0]), m[0, 2], m[1, 2])

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def inverse(self) -> Motion2D:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Motion2D(-self.theta, -(c * self.tx + s * self.ty), s * self.tx - c * self.ty)

    def __matmul__(self, other: Motion2D) -> Motion2D:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Motion2D(
            self.theta + other.theta,
            c * other.tx - s * other.ty + self.tx,
            s * other.tx + c * other.ty + self.ty,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(n, 2)`` array of points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return pts @ self.rotation().T + self.t

    def to_dict(self, index: int | None = None) -> dict:
        d = {} if index is None else {"index": index}
        d.update(theta_rad=self.theta, tx_cells=self.tx, ty_cells=self.ty)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Motion2D:
        return cls(d["theta_rad"], d["tx_cells"], d["ty_cells"])
