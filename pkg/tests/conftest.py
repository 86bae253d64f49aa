import math
import time
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gridmerge.gridmap import CellState, OccupancyGrid

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

O, F, U = CellState.OCCUPIED, CellState.FREE, CellState.UNKNOWN


def room_grid(size=64, margin=8, seed=0, resolution=0.05):
    """A small walled room with a few interior blocks, surrounded by Unknown."""
    rng = np.random.default_rng(seed)
    cells = np.full((size, size), U, dtype=np.uint8)
    lo, hi = margin, size - margin
    cells[lo:hi, lo:hi] = O
    cells[lo + 2 : hi - 2, lo + 2 : hi - 2] = F
    for _ in range(4):
        r, c = rng.integers(lo + 5, hi - 10, size=2)
        h, w = rng.integers(3, 7, size=2)
        cells[r : r + h, c : c + w] = O
    return OccupancyGrid(cells, resolution)


@pytest.fixture
def room():
    return room_grid()


def room_contour(n=200, seed=0):
    """Points along a 60x40 room outline with a partition, centred on the origin."""
    rng = np.random.default_rng(seed)
    segments = [((0, 0), (60, 0)), ((60, 0), (60, 40)), ((60, 40), (0, 40)), ((0, 40), (0, 0)), ((25, 0), (25, 22)), ((25, 22), (40, 22))]
    lengths = np.array([math.dist(a, b) for a, b in segments])
    counts = np.floor(n * lengths / lengths.sum()).astype(int)
    counts[0] += n - counts.sum()
    pts = []
    for (a, b), k in zip(segments, counts):
        s = np.sort(rng.uniform(0, 1, size=k))
        pts.append(np.outer(1 - s, a) + np.outer(s, b))
    pts = np.vstack(pts)
    return pts - pts.mean(axis=0)


class SyntheticRun:
    """One default synthetic dataset with its features and merge outcome."""

    def __init__(self, seed):
        from gridmerge.errors import GraphDisconnected
        from gridmerge.pairwise import MapFeatures
        from gridmerge.pipeline import merge_multiple
        from gridmerge.synth import generate_synthetic

        start = time.perf_counter()
        self.seed = seed
        self.world, self.maps = generate_synthetic(seed=seed)
        self.features = [MapFeatures.from_grid(m) for m in self.maps]
        self.error = None
        self.merged = None
        try:
            self.merged, self.report = merge_multiple(self.maps, features=self.features)
        except GraphDisconnected as exc:
            self.error = exc
            self.report = exc.report
        self.seconds = time.perf_counter() - start


_RUNS: dict[int, SyntheticRun] = {}


def synthetic_run(seed: int) -> SyntheticRun:
    """Cached across the session so acceptance and pipeline tests share runs."""
    if seed not in _RUNS:
        _RUNS[seed] = SyntheticRun(seed)
    return _RUNS[seed]


ACCEPTANCE: dict[int, list[tuple[bool, str]]] = defaultdict(list)


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Log one acceptance check; the summary line per criterion prints at session end."""
    ACCEPTANCE[number].append((passed, detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[number]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict} | " + "; ".join(d for _, d in checks))
