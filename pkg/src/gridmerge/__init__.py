"""Merging multiple occupancy grid maps into one global map."""

from .errors import GraphDisconnected, GridMergeError
from .gridmap import CellState, OccupancyGrid, extract_edge_points, load_grid, render_merged, save_grid
from .motion import Motion2D
from .motionavg import Se2Vector, motion_average, se2_exp, se2_log
from .pairwise import RelativeMotionEstimate, TricpConfig, estimate_rigid, pairwise_merge, tricp
from .pipeline import MergeConfig, MergeReport, evaluate_vs_ground_truth, merge_multiple, merging_error
from .posegraph import PoseGraph, connectivity_matrix_test, mcs_sample_and_confirm, motion_distance
from .synth import SynthParams, generate_synthetic

__all__ = [
    "CellState",
    "GraphDisconnected",
    "GridMergeError",
    "MergeConfig",
    "MergeReport",
    "Motion2D",
    "OccupancyGrid",
    "PoseGraph",
    "RelativeMotionEstimate",
    "Se2Vector",
    "SynthParams",
    "TricpConfig",
    "connectivity_matrix_test",
    "estimate_rigid",
    "evaluate_vs_ground_truth",
    "extract_edge_points",
    "generate_synthetic",
    "load_grid",
    "mcs_sample_and_confirm",
    "merge_multiple",
    "merging_error",
    "motion_average",
    "motion_distance",
    "pairwise_merge",
    "render_merged",
    "save_grid",
    "se2_exp",
    "se2_log",
    "tricp",
]
