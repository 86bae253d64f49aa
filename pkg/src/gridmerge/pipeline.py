"""End-to-end merging of N grid maps, error metrics and ground-truth evaluation."""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import GraphDisconnected, LengthMismatch, TooFewMaps
from .gridmap import OccupancyGrid, _check_resolutions, render_merged
from .motion import Motion2D, wrap_angle
from .motionavg import motion_average
from .pairwise import MapFeatures, PairwiseParams, RelativeMotionEstimate, TricpConfig, pairwise_merge
from .posegraph import McsResult, PoseGraph, mcs_sample_and_confirm, motion_distance
from .synth import SynthParams, SynthWorld, generate_synthetic  # noqa: F401  (re-export)

log = logging.getLogger(__name__)


@dataclass
class MergeConfig:
    master_seed: int = 0
    tricp: TricpConfig = field(default_factory=TricpConfig)
    d_thr_feat: float = 2.0
    d_thr_motion: float = 0.5
    kappa: float = 0.1
    ransac_iterations: int = 200
    mcs_iterations_factor: int = 10
    min_inliers: int = 4
    max_conflict: float | None = 0.1
    averaging_epsilon: float = 1e-10
    averaging_max_sweeps: int = 100
    thread_count: int = 1

    def __post_init__(self):
        for name in ("d_thr_feat", "d_thr_motion", "kappa", "averaging_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_inliers < 2:
            raise ValueError("min_inliers must be >= 2")
        if self.ransac_iterations < 1 or self.mcs_iterations_factor < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")

    def pairwise_params(self) -> PairwiseParams:
        return PairwiseParams(
            d_thr_feat=self.d_thr_feat,
            ransac_iterations=self.ransac_iterations,
            min_inliers=self.min_inliers,
            tricp=self.tricp,
            master_seed=self.master_seed,
            max_conflict=self.max_conflict,
        )

    def to_dict(self, include_threads: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_threads:
            del d["thread_count"]
        tr = d.pop("tricp")
        d.update({f"tricp_{k}": v for k, v in tr.items()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MergeConfig:
        """Build from the flat layout produced by ``to_dict``; unknown keys raise ``KeyError``."""
        d = dict(d)
        tr_fields = {f.name for f in dataclasses.fields(TricpConfig)}
        tr = {k[len("tricp_") :]: d.pop(k) for k in list(d) if k.startswith("tricp_")}
        unknown = set(tr) - tr_fields
        unknown |= set(d) - {f.name for f in dataclasses.fields(cls)} - {"tricp"}
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        d.pop("tricp", None)
        return cls(tricp=TricpConfig(**tr), **d)


@dataclass
class PairRecord:
    i: int
    j: int
    status: str
    inliers: int | None = None
    overlap: float | None = None
    objective: float | None = None
    classification: str | None = None
    estimate: RelativeMotionEstimate | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "i": self.i,
            "j": self.j,
            "status": self.status,
            "inliers": self.inliers,
            "overlap": self.overlap,
            "objective": self.objective,
            "classification": self.classification,
        }
        if self.estimate is not None:
            d["motion"] = self.estimate.motion.to_dict()
        return d


@dataclass
class MergeReport:
    n_maps: int
    pairs: list[PairRecord]
    e_best: int | None = None
    coarse_error: float | None = None
    fine_error: float | None = None
    consistency_coarse: float | None = None
    consistency_fine: float | None = None
    motions_coarse: list[Motion2D] = field(default_factory=list)
    motions_fine: list[Motion2D] = field(default_factory=list)
    converged: bool = False
    success: bool = False
    components: list[list[int]] | None = None
    merged_origin: tuple[float, float] | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    inputs: list[dict] = field(default_factory=list)

    @property
    def pairwise_attempted(self) -> int:
        return len(self.pairs)

    @property
    def pairwise_succeeded(self) -> int:
        return sum(p.status == "ok" for p in self.pairs)

    def edges(self, classification: str | None = None) -> list[RelativeMotionEstimate]:
        return [
            p.estimate
            for p in self.pairs
            if p.estimate is not None and (classification is None or p.classification == classification)
        ]

    @property
    def reliable_edges(self) -> list[RelativeMotionEstimate]:
        return [p.estimate for p in self.pairs if p.classification in ("tree", "reliable")]

    @property
    def unreliable_edges(self) -> list[RelativeMotionEstimate]:
        return self.edges("unreliable")

    def to_dict(self) -> dict:
        return {
            "n_maps": self.n_maps,
            "success": self.success,
            "converged": self.converged,
            "pairwise_attempted": self.pairwise_attempted,
            "pairwise_succeeded": self.pairwise_succeeded,
            "e_best": self.e_best,
            "coarse_error": self.coarse_error,
            "fine_error": self.fine_error,
            "consistency_coarse": self.consistency_coarse,
            "consistency_fine": self.consistency_fine,
            "mean_pair_objective": _mean([p.objective for p in self.pairs if p.classification in ("tree", "reliable")]),
            "components": self.components,
            "pairs": [p.to_dict() for p in self.pairs],
            "motions_coarse": [m.to_dict(k) for k, m in enumerate(self.motions_coarse)],
            "motions_fine": [m.to_dict(k) for k, m in enumerate(self.motions_fine)],
            "merged_origin_cells": list(self.merged_origin) if self.merged_origin else None,
            "inputs": self.inputs,
            "config": self.config,
            "timings_ms": self.timings_ms,
        }


def _mean(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def merging_error(
    edge_sets: Sequence[np.ndarray],
    globals_: Sequence[Motion2D],
    pairs: Sequence[RelativeMotionEstimate],
) -> float:
    """Mean over pairs of the trimmed mean nearest-neighbour distance (cells).

    For each pair both edge sets are moved into the global frame; distances go
    from the smaller set to the larger and only the best ``ceil(overlap * n)``
    are averaged.
    """
    per_pair = []
    for e in pairs:
        a = globals_[e.i].apply(edge_sets[e.i])
        b = globals_[e.j].apply(edge_sets[e.j])
        small, large = (a, b) if len(a) <= len(b) else (b, a)
        if len(small) == 0 or len(large) == 0:
            continue
        dist, _ = cKDTree(large).query(small)
        k = max(1, math.ceil(e.overlap * len(small) - 1e-9))
        per_pair.append(float(np.mean(np.sort(dist)[:k])))
    return float(np.mean(per_pair)) if per_pair else 0.0


def consistency_cost(edges, globals_, kappa: float) -> float:
    return float(sum(motion_distance(e.motion, globals_[e.i], globals_[e.j], kappa) ** 2 for e in edges))


def evaluate_vs_ground_truth(estimated: Sequence[Motion2D], truth: Sequence[Motion2D]) -> dict:
    """Per-map rotation (rad) and translation (cells) error of ``truth_i^-1 est_i``."""
    if len(estimated) != len(truth):
        raise LengthMismatch(f"{len(estimated)} estimated vs {len(truth)} true motions")
    per_map = []
    for k in range(1, len(truth)):
        delta = truth[k].inverse() @ estimated[k]
        per_map.append(
            {"index": k, "rotation_error": abs(wrap_angle(delta.theta)), "translation_error": math.hypot(delta.tx, delta.ty)}
        )
    rot = [p["rotation_error"] for p in per_map] or [0.0]
    trans = [p["translation_error"] for p in per_map] or [0.0]
    return {
        "per_map": per_map,
        "max_rotation_error": max(rot),
        "mean_rotation_error": float(np.mean(rot)),
        "max_translation_error": max(trans),
        "mean_translation_error": float(np.mean(trans)),
    }


def regauge(motions: Sequence[Motion2D], order: Sequence[int]) -> list[Motion2D]:
    """Re-express global motions for maps listed in ``order``, with ``order[0]`` as reference."""
    ref_inv = motions[order[0]].inverse()
    return [ref_inv @ motions[k] for k in order]


def _map_parallel(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def merge_multiple(
    maps: Sequence[OccupancyGrid],
    config: MergeConfig | None = None,
    features: Sequence[MapFeatures] | None = None,
) -> tuple[OccupancyGrid, MergeReport]:
    """Merge grid maps into the frame of ``maps[0]``.

    ``features`` may carry precomputed per-map features (same order as
    ``maps``). Raises ``GraphDisconnected`` (with the partial report on ``.report``) when
    the reliable pairs do not connect every map.
    """
    cfg = config or MergeConfig()
    if len(maps) < 2:
        raise TooFewMaps(f"need at least 2 maps, got {len(maps)}")
    _check_resolutions(maps)
    n = len(maps)
    timings: dict[str, float] = {}
    # the thread count cannot change results, so it stays out of the echo
    report = MergeReport(n_maps=n, pairs=[], config=cfg.to_dict(include_threads=False), timings_ms=timings)
    report.inputs = [{"name": g.name, "width": g.width, "height": g.height} for g in maps]

    t0 = time.perf_counter()
    if features is not None and len(features) != n:
        raise LengthMismatch(f"{len(features)} feature sets for {n} maps")
    feats = list(features) if features is not None else _map_parallel(MapFeatures.from_grid, maps, cfg.thread_count)
    timings["features"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    params = cfg.pairwise_params()
    pairs = list(itertools.combinations(range(n), 2))

    def run_pair(ij):
        i, j = ij
        diag: dict = {}
        est = pairwise_merge(maps[i], maps[j], i, j, params, feats[i], feats[j], diagnostics=diag)
        return est, diag

    results = _map_parallel(run_pair, pairs, cfg.thread_count)
    for (i, j), (est, diag) in zip(pairs, results):
        if est is None:
            report.pairs.append(PairRecord(i, j, f"rejected: {diag.get('stage', 'unknown')}", diag.get("inliers")))
        else:
            report.pairs.append(PairRecord(i, j, "ok", est.inliers, est.overlap, est.objective, estimate=est))
    timings["pairwise"] = 1e3 * (time.perf_counter() - t0)

    t0 = time.perf_counter()
    graph = PoseGraph(n, [p.estimate for p in report.pairs if p.estimate is not None])
    try:
        mcs = mcs_sample_and_confirm(
            graph, cfg.d_thr_motion, cfg.master_seed, cfg.kappa, cfg.mcs_iterations_factor
        )
    except GraphDisconnected as exc:
        report.components = exc.components
        for p in report.pairs:
            if p.estimate is not None:
                p.classification = "unclassified"
        timings["mcs"] = 1e3 * (time.perf_counter() - t0)
        exc.report = report
        raise
    timings["mcs"] = 1e3 * (time.perf_counter() - t0)
    _classify(report, mcs)
    report.e_best = mcs.support

    t0 = time.perf_counter()
    avg = motion_average(mcs.global_motions, mcs.reliable_edges, cfg.averaging_epsilon, cfg.averaging_max_sweeps)
    timings["averaging"] = 1e3 * (time.perf_counter() - t0)
    report.motions_coarse = list(mcs.global_motions)
    report.motions_fine = list(avg.global_motions)
    report.converged = avg.converged
    report.success = True

    edges = [f.edges for f in feats]
    report.coarse_error = merging_error(edges, mcs.global_motions, mcs.reliable_edges)
    report.fine_error = merging_error(edges, avg.global_motions, mcs.reliable_edges)
    report.consistency_coarse = consistency_cost(mcs.reliable_edges, mcs.global_motions, cfg.kappa)
    report.consistency_fine = consistency_cost(mcs.reliable_edges, avg.global_motions, cfg.kappa)

    t0 = time.perf_counter()
    merged = render_merged(maps, avg.global_motions)
    timings["render"] = 1e3 * (time.perf_counter() - t0)
    report.merged_origin = merged.origin
    return merged, report


def _classify(report: MergeReport, mcs: McsResult) -> None:
    for p in report.pairs:
        if p.estimate is not None:
            p.classification = mcs.classify(p.estimate)
