"""Difference-of-Gaussians keypoints, gradient-histogram descriptors, matching.

The scale space is not decimated between octaves: every level is the input
blurred directly to its absolute sigma. That keeps detection exactly
equivariant under integer translations and 90 degree rotations, which the
grid maps (axis-aligned rasters) rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import ImageTooSmall, OutOfBounds
from .gridmap import CellState, OccupancyGrid
from .motion import wrap_angle

N_OCTAVES = 3
SCALES_PER_OCTAVE = 3
BASE_SIGMA = 1.6
CONTRAST_THRESHOLD = 0.01
EDGE_RATIO = 10.0
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
DESC_WIDTH = 4
DESC_BINS = 8
DESCRIPTOR_LENGTH = DESC_WIDTH * DESC_WIDTH * DESC_BINS
DESC_SCALE = 3.0
DESC_CLAMP = 0.2
RATIO_TEST = 0.8
MIN_IMAGE_SIZE = 16
# cells are replicated into UPSAMPLE x UPSAMPLE blocks before blurring so the
# finest level resolves features smaller than a cell
UPSAMPLE = 2
# anti-aliasing blur (cells) applied to the raw raster; occupancy rasters are
# perfectly sharp, which makes the finest levels fire on stair-stepping
PRE_BLUR = 1.0
PLATEAU_TOL = 1e-12


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    level: int = 0  # index of the Gaussian level the keypoint was found on
    response: float = 0.0

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "scale": self.scale,
            "orientation": self.orientation,
            "response": self.response,
        }


@dataclass(frozen=True)
class FeatureMatch:
    index_p: int
    index_q: int
    distance: float


def to_intensity(grid: OccupancyGrid) -> np.ndarray:
    lut = np.empty(3)
    lut[CellState.OCCUPIED] = 1.0
    lut[CellState.FREE] = 0.0
    lut[CellState.UNKNOWN] = 0.5
    return lut[grid.cells]


def level_sigma(level: int | float) -> float:
    return BASE_SIGMA * 2.0 ** (level / SCALES_PER_OCTAVE)


def _upsample(image: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(image, UPSAMPLE, axis=0), UPSAMPLE, axis=1)


class ScaleSpace:
    """Gaussian levels ``0 .. 3*octaves+2`` of the upsampled image and their differences.

    Sigmas are in upsampled pixels; divide by ``UPSAMPLE`` for cells.
    """

    def __init__(self, image: np.ndarray):
        image = np.asarray(image, dtype=float)
        if image.ndim != 2 or min(image.shape) < MIN_IMAGE_SIZE:
            raise ImageTooSmall(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {image.shape}")
        self.image = _upsample(ndimage.gaussian_filter(image, PRE_BLUR, mode="nearest"))
        n_levels = N_OCTAVES * SCALES_PER_OCTAVE + 3
        self.gaussians = np.stack(
            [ndimage.gaussian_filter(self.image, level_sigma(m), mode="nearest") for m in range(n_levels)]
        )
        self.dog = np.diff(self.gaussians, axis=0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


def _refine(dog: np.ndarray, m: int, r: int, c: int):
    """Quadratic fit around a DoG extremum. Returns (m, r, c, offset, value) or None."""
    n_dog, h, w = dog.shape
    for _ in range(5):
        cube = dog[m - 1 : m + 2, r - 1 : r + 2, c - 1 : c + 2]
        g = 0.5 * np.array(
            [cube[1, 1, 2] - cube[1, 1, 0], cube[1, 2, 1] - cube[1, 0, 1], cube[2, 1, 1] - cube[0, 1, 1]]
        )
        v = cube[1, 1, 1]
        dxx = cube[1, 1, 2] + cube[1, 1, 0] - 2 * v
        dyy = cube[1, 2, 1] + cube[1, 0, 1] - 2 * v
        dss = cube[2, 1, 1] + cube[0, 1, 1] - 2 * v
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) <= 0.5):
            value = v + 0.5 * g @ offset
            return m, r, c, offset, value, (dxx, dyy, dxy)
        if not np.all(np.isfinite(offset)):
            return None
        c += int(np.round(offset[0]))
        r += int(np.round(offset[1]))
        m += int(np.round(offset[2]))
        if not (1 <= m <= n_dog - 2 and 1 <= r <= h - 2 and 1 <= c <= w - 2):
            return None
    return None


def _orientation_peaks(gauss: np.ndarray, x: float, y: float, sigma: float) -> list[float]:
    """Dominant gradient directions around the continuous sample position ``(x, y)``."""
    h, w = gauss.shape
    sigma_w = 1.5 * sigma
    radius = 3 * sigma_w
    r0, r1 = max(int(math.floor(y - radius)), 1), min(int(math.ceil(y + radius)), h - 2)
    c0, c1 = max(int(math.floor(x - radius)), 1), min(int(math.ceil(x + radius)), w - 2)
    if r0 > r1 or c0 > c1:
        return []
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    gx = gauss[rr, cc + 1] - gauss[rr, cc - 1]
    gy = gauss[rr + 1, cc] - gauss[rr - 1, cc]
    mag = np.hypot(gx, gy)
    d2 = (rr + 0.5 - y) ** 2 + (cc + 0.5 - x) ** 2
    keep = d2 <= radius * radius
    weight = np.exp(-d2 / (2 * sigma_w**2)) * mag
    ang = np.arctan2(gy, gx)
    fbin = (ang[keep] % (2 * np.pi)) * ORI_BINS / (2 * np.pi)
    lo = np.floor(fbin).astype(int)
    frac = fbin - lo
    hist = np.zeros(ORI_BINS)
    np.add.at(hist, lo % ORI_BINS, weight[keep] * (1 - frac))
    np.add.at(hist, (lo + 1) % ORI_BINS, weight[keep] * frac)
    hist = (
        6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1)) + np.roll(hist, 2) + np.roll(hist, -2)
    ) / 16.0
    peak = hist.max()
    if peak <= 1e-12:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    peaks = []
    # a peak split evenly between two bins must still count once
    for b in np.nonzero((hist >= left) & (hist > right) & (hist >= ORI_PEAK_RATIO * peak))[0]:
        denom = left[b] - 2 * hist[b] + right[b]
        shift = 0.5 * (left[b] - right[b]) / denom if denom != 0 else 0.0
        peaks.append(wrap_angle(2 * np.pi * (b + shift) / ORI_BINS))
    return peaks


def detect_keypoints(image, scale_space: ScaleSpace | None = None) -> list[Keypoint]:
    """Scale-space extrema of the DoG stack with one or more orientations each.

    Keypoint positions use the cell-centre convention: pixel ``(col, row)``
    spans ``[col, col+1) x [row, row+1)``.
    """
    ss = scale_space if scale_space is not None else ScaleSpace(image)
    dog = ss.dog
    n_dog, h, w = dog.shape
    fp = np.ones((3, 3, 3), dtype=bool)
    fp[1, 1, 1] = False
    nb_max = ndimage.maximum_filter(dog, footprint=fp, mode="nearest")
    nb_min = ndimage.minimum_filter(dog, footprint=fp, mode="nearest")
    # non-strict: block-replicated cells put symmetric extrema on exact plateaus;
    # the plateau pixels refine to one sub-pixel point and are merged below.
    # The tolerance keeps ties stable against filter round-off, which differs
    # between an image and its rotated copy.
    cand = ((dog >= nb_max - PLATEAU_TOL) | (dog <= nb_min + PLATEAU_TOL)) & (np.abs(dog) > 0.5 * CONTRAST_THRESHOLD)
    cand[0] = cand[-1] = False
    cand[:, :1] = cand[:, -1:] = False
    cand[:, :, :1] = cand[:, :, -1:] = False

    edge_limit = (EDGE_RATIO + 1) ** 2 / EDGE_RATIO
    seen = set()
    keypoints = []
    for m, r, c in zip(*np.nonzero(cand)):
        fit = _refine(dog, int(m), int(r), int(c))
        if fit is None:
            continue
        m2, r2, c2, offset, value, (dxx, dyy, dxy) = fit
        x = c2 + offset[0] + 0.5
        y = r2 + offset[1] + 0.5
        key = (m2, round(x, 4), round(y, 4))
        if key in seen:
            continue
        seen.add(key)
        if abs(value) < CONTRAST_THRESHOLD:
            continue
        tr, det = dxx + dyy, dxx * dyy - dxy * dxy
        if det <= 0 or tr * tr / det >= edge_limit:
            continue
        if not (0 <= x < w and 0 <= y < h):
            continue
        sigma = level_sigma(m2 + offset[2])
        for ori in _orientation_peaks(ss.gaussians[m2], x, y, sigma):
            keypoints.append(
                Keypoint(float(x / UPSAMPLE), float(y / UPSAMPLE), float(sigma / UPSAMPLE), float(ori), int(m2), float(abs(value)))
            )
    return keypoints


def describe(image, keypoint: Keypoint) -> np.ndarray:
    """128-value descriptor in the keypoint's orientation frame.

    ``image`` may be a raw image or a ``ScaleSpace`` (preferred: avoids
    re-blurring). Raises ``OutOfBounds`` when the support window leaves the
    image.
    """
    if isinstance(image, ScaleSpace):
        gauss = image.gaussians[keypoint.level]
    else:
        gauss = ScaleSpace(image).gaussians[keypoint.level]
    h, w = gauss.shape
    d, n = DESC_WIDTH, DESC_BINS
    hist_width = DESC_SCALE * keypoint.scale * UPSAMPLE
    radius = hist_width * math.sqrt(2) * (d + 1) * 0.5
    x, y = keypoint.x * UPSAMPLE, keypoint.y * UPSAMPLE
    if x - radius < 2 or y - radius < 2 or x + radius > w - 2 or y + radius > h - 2:
        raise OutOfBounds(f"support radius {radius:.1f} at ({keypoint.x:.1f}, {keypoint.y:.1f}) leaves the image")

    rr, cc = np.mgrid[
        int(math.floor(y - radius)) : int(math.ceil(y + radius)) + 1,
        int(math.floor(x - radius)) : int(math.ceil(x + radius)) + 1,
    ]
    dx, dy = cc + 0.5 - x, rr + 0.5 - y
    gx = gauss[rr, cc + 1] - gauss[rr, cc - 1]
    gy = gauss[rr + 1, cc] - gauss[rr - 1, cc]
    cos_t, sin_t = math.cos(keypoint.orientation), math.sin(keypoint.orientation)
    # offsets expressed in the keypoint frame
    lx = (cos_t * dx + sin_t * dy) / hist_width
    ly = (-sin_t * dx + cos_t * dy) / hist_width
    rbin = ly + d / 2 - 0.5
    cbin = lx + d / 2 - 0.5
    keep = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    mag = np.hypot(gx, gy)
    weight = np.exp(-(lx**2 + ly**2) / (2 * (0.5 * d) ** 2))
    obin = ((np.arctan2(gy, gx) - keypoint.orientation) % (2 * np.pi)) * n / (2 * np.pi)

    rbin, cbin, obin = rbin[keep], cbin[keep], obin[keep]
    val = (mag * weight)[keep]
    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    hist = np.zeros((d + 2, d + 2, n))
    for ir, wr in ((0, 1 - fr), (1, fr)):
        for ic, wc in ((0, 1 - fc), (1, fc)):
            for io, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + ir + 1, c0 + ic + 1, (o0 + io) % n), val * wr * wc * wo)
    vec = hist[1:-1, 1:-1, :].ravel()

    norm = np.linalg.norm(vec)
    if norm <= 1e-12:
        return np.zeros(d * d * n)
    vec = np.minimum(vec / norm, DESC_CLAMP)
    return vec / np.linalg.norm(vec)


def extract_features(image) -> tuple[list[Keypoint], np.ndarray]:
    """Detect and describe; keypoints whose window leaves the image are dropped."""
    if isinstance(image, OccupancyGrid):
        image = to_intensity(image)
    ss = ScaleSpace(image)
    kps, descs = [], []
    for kp in detect_keypoints(image, ss):
        try:
            descs.append(describe(ss, kp))
        except OutOfBounds:
            continue
        kps.append(kp)
    return kps, np.array(descs).reshape(len(kps), DESC_WIDTH * DESC_WIDTH * DESC_BINS)


def _one_way(dist: np.ndarray, ratio: float) -> list[tuple[int, int, float]]:
    out = []
    if dist.shape[1] == 0:
        return out
    order = np.argsort(dist, axis=1, kind="stable")
    for i in range(dist.shape[0]):
        best = order[i, 0]
        d1 = dist[i, best]
        d2 = dist[i, order[i, 1]] if dist.shape[1] > 1 else np.inf
        if d1 < ratio * d2 or (d1 == 0.0 and d2 > 0.0):
            out.append((i, int(best), float(d1)))
    return out


def match_bidirectional(desc_p: Sequence, desc_q: Sequence, ratio: float = RATIO_TEST) -> list[FeatureMatch]:
    """Union of ratio-tested nearest neighbours P->Q and Q->P."""
    if len(desc_p) == 0 or len(desc_q) == 0:
        return []
    p = np.asarray(desc_p, dtype=float).reshape(len(desc_p), -1)
    q = np.asarray(desc_q, dtype=float).reshape(len(desc_q), -1)
    dist = cdist(p, q)
    pairs = {(i, j): d for i, j, d in _one_way(dist, ratio)}
    for j, i, d in _one_way(dist.T, ratio):
        pairs.setdefault((i, j), d)
    ordered = sorted(pairs.items(), key=lambda kv: (kv[1], kv[0][0], kv[0][1]))
    return [FeatureMatch(i, j, d) for (i, j), d in ordered]
