"""Relative motion of a map pair: rigid fit, RANSAC initialisation, trimmed ICP."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInput,
    GridMergeError,
    NonFiniteObjective,
    ResolutionMismatch,
    TooFewMatches,
    TooFewPoints,
)
from .features import FeatureMatch, Keypoint, extract_features, match_bidirectional
from .gridmap import CellState, OccupancyGrid, extract_edge_points
from .motion import Motion2D

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TricpConfig:
    lam: float = 2.0
    xi_min: float = 0.2
    max_iterations: int = 100
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.xi_min <= 1:
            raise ValueError("xi_min must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class TricpResult:
    motion: Motion2D
    overlap: float
    objective: float
    iterations: int
    history: tuple[float, ...] = ()
    trimmed_mse: float = 0.0  # mean squared residual over the kept pairs

    @property
    def trimmed_rms(self) -> float:
        return math.sqrt(self.trimmed_mse)


@dataclass(frozen=True)
class RelativeMotionEstimate:
    """Edge of the pose graph; ``motion`` maps map ``j`` coordinates into map ``i``."""

    i: int
    j: int
    motion: Motion2D
    inliers: int
    overlap: float
    objective: float

    def to_dict(self) -> dict:
        return {
            "i": self.i,
            "j": self.j,
            "inliers": self.inliers,
            "overlap": self.overlap,
            "objective": self.objective,
            "motion": self.motion.to_dict(),
        }


@dataclass(frozen=True)
class PairwiseParams:
    d_thr_feat: float = 2.0
    ransac_iterations: int = 200
    min_inliers: int = 4
    tricp: TricpConfig = field(default_factory=TricpConfig)
    master_seed: int = 0
    # reject aligned pairs where more than this fraction of occupied cells lands
    # on the other map's free space; None disables the check
    max_conflict: float | None = 0.1


@dataclass(frozen=True, eq=False)
class MapFeatures:
    """Per-map data reused across every pair the map takes part in."""

    keypoints: list[Keypoint]
    descriptors: np.ndarray
    edges: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return np.array([[k.x, k.y] for k in self.keypoints]).reshape(-1, 2)

    @classmethod
    def from_grid(cls, grid: OccupancyGrid) -> MapFeatures:
        kps, desc = extract_features(grid)
        return cls(kps, desc, extract_edge_points(grid))


def estimate_rigid(src, dst) -> Motion2D:
    """Least-squares rotation + translation taking ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 2:
        raise ValueError("need two equal-length point lists with at least 2 points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    scale = max(np.abs(src).max(), 1.0)
    if np.abs(a).max() <= 1e-12 * scale:
        raise DegenerateInput("source points coincide; rotation is unobservable")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, d]) @ u.T
    t = mu_d - rot @ mu_s
    return Motion2D(math.atan2(rot[1, 0], rot[0, 0]), t[0], t[1])


def _positions(kps) -> np.ndarray:
    if isinstance(kps, np.ndarray):
        return kps.reshape(-1, 2).astype(float)
    return np.array([[k.x, k.y] for k in kps], dtype=float).reshape(-1, 2)


def ransac_initial_motion(
    matches: Sequence[FeatureMatch],
    kp_p,
    kp_q,
    d_thr_feat: float = 2.0,
    iterations: int = 200,
    rng_seed: int | np.random.SeedSequence = 0,
) -> tuple[Motion2D, int]:
    """Best two-match hypothesis by inlier count; fits P locations onto Q locations."""
    if len(matches) < 2:
        raise TooFewMatches(f"need at least 2 matches, got {len(matches)}")
    pp, pq = _positions(kp_p), _positions(kp_q)
    src = pp[[m.index_p for m in matches]]
    dst = pq[[m.index_q for m in matches]]
    rng = np.random.default_rng(rng_seed)

    best, best_count = None, -1
    k = draws = 0
    while k < iterations and draws < 20 * iterations:
        draws += 1
        a, b = rng.choice(len(matches), size=2, replace=False)
        try:
            guess = estimate_rigid(src[[a, b]], dst[[a, b]])
        except DegenerateInput:
            continue
        k += 1
        resid = np.linalg.norm(guess.apply(src) - dst, axis=1)
        count = int(np.count_nonzero(resid <= d_thr_feat))
        if count > best_count:
            best, best_count = guess, count
    if best is None:
        raise DegenerateInput("every sampled match pair was degenerate")
    return best, best_count


PSI_TIE_TOL = 1e-12


def _trim(sq: np.ndarray, n_min: int, lam: float) -> tuple[int, float, np.ndarray]:
    """Pick the overlap count n minimising S(n) / (n (n/Np)^(1+lam)).

    Returns ``(n*, psi(n*), order)``. Values within ``PSI_TIE_TOL`` of the
    minimum count as ties, which go to the larger n, so round-off residuals
    on exact data do not trim points.
    """
    n_p = len(sq)
    order = np.argsort(sq, kind="stable")
    prefix = np.cumsum(sq[order])
    ns = np.arange(n_min, n_p + 1)
    psi = prefix[ns - 1] / (ns * (ns / n_p) ** (1.0 + lam))
    best = int(np.flatnonzero(psi <= psi.min() + PSI_TIE_TOL)[-1])
    return int(ns[best]), float(psi[best]), order


def tricp(p_edges, q_edges, init: Motion2D, config: TricpConfig | None = None) -> TricpResult:
    """Trimmed ICP moving ``p_edges`` onto ``q_edges``.

    Each iteration: nearest-neighbour correspondences, exhaustive overlap
    search over the sorted residuals, rigid refit on the kept pairs. Stops when
    the objective changes by less than ``epsilon``.
    """
    cfg = config or TricpConfig()
    p = np.asarray(p_edges, dtype=float).reshape(-1, 2)
    q = np.asarray(q_edges, dtype=float).reshape(-1, 2)
    if len(p) < 10 or len(q) < 10:
        raise TooFewPoints(f"need >= 10 edge points per set, got {len(p)} and {len(q)}")
    n_p = len(p)
    n_min = max(1, math.ceil(cfg.xi_min * n_p - 1e-9))
    tree = cKDTree(q)

    def evaluate(m: Motion2D):
        dist, idx = tree.query(m.apply(p))
        n, psi, order = _trim(dist**2, n_min, cfg.lam)
        if not math.isfinite(psi):
            raise NonFiniteObjective("trimmed objective is not finite")
        return n, psi, order[:n], idx

    motion = init
    history: list[float] = []
    prev = math.inf
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        n, psi, keep, idx = evaluate(motion)
        history.append(psi)
        if abs(prev - psi) < cfg.epsilon:
            break
        prev = psi
        motion = estimate_rigid(p[keep], q[idx[keep]])
    n, psi, _, _ = evaluate(motion)
    if history and psi < history[-1]:
        history.append(psi)
    mse = psi * (n / n_p) ** (1.0 + cfg.lam)
    return TricpResult(motion, n / n_p, psi, iterations, tuple(history), mse)


def grid_digest(grid: OccupancyGrid) -> int:
    """64-bit content hash of a grid's cells and shape."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(grid.cells.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(grid.cells, dtype=np.uint8).tobytes())
    return int.from_bytes(h.digest(), "little")


def pair_seed(master_seed: int, key_a: int, key_b: int) -> np.random.SeedSequence:
    """Per-pair RANSAC seed; symmetric in the two keys."""
    lo, hi = sorted((int(key_a), int(key_b)))
    return np.random.SeedSequence([int(master_seed), lo, hi])


def _conflict_one_way(target: OccupancyGrid, source: OccupancyGrid, motion: Motion2D) -> tuple[int, int]:
    rows, cols = np.nonzero(source.cells == CellState.OCCUPIED)
    pts = motion.apply(np.column_stack([cols + 0.5, rows + 0.5]))
    c = np.floor(pts[:, 0]).astype(np.int64)
    r = np.floor(pts[:, 1]).astype(np.int64)
    inside = (c >= 0) & (r >= 0) & (c < target.width) & (r < target.height)
    r, c = r[inside], c[inside]
    # one cell of slack absorbs re-rasterisation of walls
    near_occ = binary_dilation(target.cells == CellState.OCCUPIED)[r, c]
    free = (target.cells == CellState.FREE)[r, c] & ~near_occ
    return int(free.sum()), int(near_occ.sum() + free.sum())


def occupancy_conflict(map_p: OccupancyGrid, map_q: OccupancyGrid, motion: Motion2D) -> float:
    """Worst-direction fraction of occupied cells that land on the other map's free space.

    ``motion`` takes ``map_q`` cells into ``map_p``.  Only occupied cells that
    land on known (occupied or free) cells are counted.  With nothing observed
    in either direction the pair is treated as fully conflicting.
    """
    bad_q, seen_q = _conflict_one_way(map_p, map_q, motion)
    bad_p, seen_p = _conflict_one_way(map_q, map_p, motion.inverse())
    if seen_p == 0 and seen_q == 0:
        return 1.0
    return max(bad_q / seen_q if seen_q else 0.0, bad_p / seen_p if seen_p else 0.0)


def pairwise_merge(
    map_p: OccupancyGrid,
    map_q: OccupancyGrid,
    i: int,
    j: int,
    params: PairwiseParams | None = None,
    feats_p: MapFeatures | None = None,
    feats_q: MapFeatures | None = None,
    diagnostics: dict | None = None,
) -> RelativeMotionEstimate | None:
    """Estimate the motion taking map ``j`` (``map_q``) into map ``i`` (``map_p``).

    Returns ``None`` when the pair fails the inlier gate, the aligned maps
    contradict each other, or any estimation stage fails; ``diagnostics`` (if given) receives the rejecting stage.
    """
    prm = params or PairwiseParams()
    diag = diagnostics if diagnostics is not None else {}
    if not math.isclose(map_p.resolution, map_q.resolution, rel_tol=1e-9):
        raise ResolutionMismatch(f"resolutions differ: {map_p.resolution} vs {map_q.resolution}")
    try:
        fp = feats_p or MapFeatures.from_grid(map_p)
        fq = feats_q or MapFeatures.from_grid(map_q)
    except GridMergeError as exc:
        diag["stage"] = f"features ({exc})"
        return None

    # the sparser edge set is the one being moved and the RANSAC seed comes
    # from map content, so neither the listing order nor the indices matter
    key_p, key_q = grid_digest(map_p), grid_digest(map_q)
    j_moves = (len(fq.edges), key_q) <= (len(fp.edges), key_p)
    subject, model = (fq, fp) if j_moves else (fp, fq)

    matches = match_bidirectional(subject.descriptors, model.descriptors)
    diag["matches"] = len(matches)
    try:
        init, inliers = ransac_initial_motion(
            matches,
            subject.positions,
            model.positions,
            prm.d_thr_feat,
            prm.ransac_iterations,
            pair_seed(prm.master_seed, key_p, key_q),
        )
    except GridMergeError as exc:
        diag["stage"] = f"ransac ({exc})"
        return None
    diag["inliers"] = inliers
    if inliers < prm.min_inliers:
        diag["stage"] = "inlier gate"
        return None
    try:
        res = tricp(subject.edges, model.edges, init, prm.tricp)
    except GridMergeError as exc:
        diag["stage"] = f"tricp ({exc})"
        return None
    motion = res.motion if j_moves else res.motion.inverse()
    if prm.max_conflict is not None:
        conflict = occupancy_conflict(map_p, map_q, motion)
        diag["conflict"] = conflict
        if conflict > prm.max_conflict:
            diag["stage"] = "conflict gate"
            return None
    return RelativeMotionEstimate(i, j, motion, inliers, res.overlap, res.objective)
