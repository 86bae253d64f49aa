import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import room_grid
from gridmerge.errors import ImageTooSmall, OutOfBounds
from gridmerge.features import (
    DESCRIPTOR_LENGTH,
    Keypoint,
    ScaleSpace,
    describe,
    detect_keypoints,
    extract_features,
    match_bidirectional,
    to_intensity,
)
from gridmerge.gridmap import CellState, OccupancyGrid
from gridmerge.motion import wrap_angle

O, F, U = CellState.OCCUPIED, CellState.FREE, CellState.UNKNOWN


def test_intensity_values():
    assert to_intensity(OccupancyGrid.from_states([[O]])).tolist() == [[1.0]]
    assert to_intensity(OccupancyGrid.from_states([[U, F]])).tolist() == [[0.5, 0.0]]


def test_intensity_histogram():
    rng = np.random.default_rng(8)
    g = OccupancyGrid(rng.integers(0, 3, size=(8, 8)), 0.05)
    img = to_intensity(g)
    assert img.shape == (8, 8)
    for state, value in ((O, 1.0), (F, 0.0), (U, 0.5)):
        assert np.count_nonzero(img == value) == g.count(state)


def test_too_small():
    with pytest.raises(ImageTooSmall):
        detect_keypoints(np.zeros((15, 40)))


def test_constant_image():
    assert detect_keypoints(np.full((32, 32), 0.5)) == []


@pytest.fixture(scope="module")
def image():
    return to_intensity(room_grid(size=96, margin=16, seed=3))


def _by_position(kps):
    return sorted(kps, key=lambda k: (round(k.x, 6), round(k.y, 6), round(k.orientation, 6)))


def _rotated_partner(base, q, w):
    """Keypoint of ``base`` matching ``q`` from the 90-degree rotated image.

    A 90 degree array rotation takes ``(x, y)`` to ``(y, w - x)`` and turns
    orientations by ``-pi/2`` (image rows point down).
    """

    def cost(k):
        return math.hypot(k.y - q.x, w - k.x - q.y) + abs(wrap_angle(q.orientation - k.orientation + math.pi / 2))

    return min(base, key=cost)


@pytest.mark.parametrize("seed", range(4))
def test_rotation_equivariance(seed):
    img = to_intensity(room_grid(size=96, margin=16, seed=seed))
    w = img.shape[1]
    base = detect_keypoints(img)
    turned = detect_keypoints(np.rot90(img))
    assert len(base) == len(turned) > 0
    for q in turned:
        k = _rotated_partner(base, q, w)
        assert math.hypot(k.y - q.x, w - k.x - q.y) < 1.0
        assert abs(wrap_angle(q.orientation - k.orientation + math.pi / 2)) < 0.15


def test_translation_equivariance(image):
    shifted = np.pad(image, ((7, 0), (10, 0)), constant_values=0.5)
    base = detect_keypoints(image)
    moved = detect_keypoints(shifted)
    h, w = image.shape
    interior = [k for k in base if 16 <= k.x <= w - 16 and 16 <= k.y <= h - 16]
    assert interior
    for k in interior:
        q = min(moved, key=lambda q: (q.x - k.x - 10) ** 2 + (q.y - k.y - 7) ** 2)
        assert math.hypot(q.x - k.x - 10, q.y - k.y - 7) < 0.5


def test_detection_deterministic(image):
    assert detect_keypoints(image) == detect_keypoints(image)


def test_keypoint_invariants(image):
    h, w = image.shape
    for k in detect_keypoints(image):
        assert k.scale > 0
        assert 0 <= k.x < w and 0 <= k.y < h
        assert -math.pi < k.orientation <= math.pi


def test_constant_window_descriptor():
    img = np.zeros((64, 64))
    img[:4, :4] = 1.0
    d = describe(img, Keypoint(40.0, 40.0, 1.0, 0.3))
    assert d.shape == (DESCRIPTOR_LENGTH,)
    assert not d.any()


def test_descriptor_out_of_bounds(image):
    with pytest.raises(OutOfBounds):
        describe(image, Keypoint(2.0, 2.0, 2.0, 0.0))


def test_descriptor_norms(image):
    kps, desc = extract_features(image)
    assert desc.shape == (len(kps), DESCRIPTOR_LENGTH)
    norms = np.linalg.norm(desc, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-6) | (norms == 0))


def test_descriptor_rotation(image):
    w = image.shape[1]
    kps, desc = extract_features(image)
    kr, dr = extract_features(np.rot90(image))
    assert len(kps) == len(kr) > 0
    index = {id(k): i for i, k in enumerate(kps)}
    for q, dq in zip(kr, dr):
        k = _rotated_partner(kps, q, w)
        assert np.linalg.norm(desc[index[id(k)]] - dq) < 0.35


def test_shared_scale_space(image):
    ss = ScaleSpace(image)
    assert detect_keypoints(image, ss) == detect_keypoints(image)
    k = detect_keypoints(image)[0]
    assert np.array_equal(describe(ss, k), describe(image, k))


def test_match_identity():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(12, 128))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    matches = match_bidirectional(d, d)
    assert [(m.index_p, m.index_q) for m in matches] == [(i, i) for i in range(12)]
    assert all(m.distance == 0 for m in matches)


def test_match_empty():
    assert match_bidirectional(np.zeros((0, 128)), np.ones((3, 128))) == []
    assert match_bidirectional(np.ones((3, 128)), np.zeros((0, 128))) == []


def one_way(dp, dq, ratio=0.8):
    """Independent ratio-tested nearest neighbours, P to Q."""
    out = set()
    for i, p in enumerate(dp):
        dist = [float(np.linalg.norm(p - q)) for q in dq]
        order = sorted(range(len(dq)), key=lambda j: (dist[j], j))
        second = dist[order[1]] if len(order) > 1 else math.inf
        if dist[order[0]] < ratio * second:
            out.add((i, order[0]))
    return out


descriptor_sets = hnp.arrays(
    np.float64, st.tuples(st.integers(1, 12), st.just(8)), elements=st.floats(-1, 1, allow_subnormal=False)
)


@given(dp=descriptor_sets, dq=descriptor_sets)
def test_match_union_property(dp, dq):
    matches = match_bidirectional(dp, dq)
    pairs = [(m.index_p, m.index_q) for m in matches]
    forward = one_way(dp, dq)
    backward = {(i, j) for j, i in one_way(dq, dp)}
    assert set(pairs) == forward | backward
    assert len(pairs) == len(set(pairs))
    assert len(pairs) >= len(forward)
    keys = [(m.distance, m.index_p, m.index_q) for m in matches]
    assert keys == sorted(keys)
    for m in matches:
        assert m.distance == pytest.approx(np.linalg.norm(dp[m.index_p] - dq[m.index_q]))
