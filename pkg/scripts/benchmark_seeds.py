"""Merge a batch of synthetic worlds and tabulate accuracy and run time.

    python scripts/benchmark_seeds.py --seeds 0-19 --maps 6 --out runs.json
"""

import argparse
import json
import time

import numpy as np

from gridmerge.errors import GraphDisconnected
from gridmerge.pairwise import MapFeatures
from gridmerge.pipeline import MergeConfig, evaluate_vs_ground_truth, merge_multiple, merging_error
from gridmerge.synth import SynthParams, generate_synthetic


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        seeds.extend(range(int(lo), int(hi or lo) + 1))
    return seeds


def run_seed(seed: int, n_maps: int, cfg: MergeConfig) -> dict:
    start = time.perf_counter()
    world, maps = generate_synthetic(SynthParams(n_maps=n_maps), seed=seed)
    feats = [MapFeatures.from_grid(m) for m in maps]
    row = {"seed": seed}
    try:
        _, report = merge_multiple(maps, cfg, feats)
    except GraphDisconnected as exc:
        row.update(status="disconnected", components=exc.components)
        row["seconds"] = time.perf_counter() - start
        return row
    errs = evaluate_vs_ground_truth(report.motions_fine, world.motions)
    row.update(
        status="merged",
        coarse=report.coarse_error,
        fine=report.fine_error,
        truth=merging_error([f.edges for f in feats], world.motions, report.reliable_edges),
        max_rot=errs["max_rotation_error"],
        max_trans=errs["max_translation_error"],
        converged=report.converged,
    )
    row["seconds"] = time.perf_counter() - start
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0-9", help="e.g. 0-19 or 1,4,7-9")
    ap.add_argument("--maps", type=int, default=6)
    ap.add_argument("--master-seed", type=int, default=0)
    ap.add_argument("--out", help="write the per-seed rows as JSON")
    args = ap.parse_args()

    cfg = MergeConfig(master_seed=args.master_seed)
    rows = []
    print(f"{'seed':>4} {'status':>12} {'coarse':>8} {'fine':>8} {'truth':>8} {'rot':>8} {'trans':>7} {'sec':>6}")
    for seed in parse_seeds(args.seeds):
        row = run_seed(seed, args.maps, cfg)
        rows.append(row)
        if row["status"] == "merged":
            print(
                f"{seed:>4} {'merged':>12} {row['coarse']:8.4f} {row['fine']:8.4f} {row['truth']:8.4f}"
                f" {row['max_rot']:8.4f} {row['max_trans']:7.3f} {row['seconds']:6.1f}"
            )
        else:
            print(f"{seed:>4} {'disconnected':>12} components {row['components']}")

    merged = [r for r in rows if r["status"] == "merged"]
    if merged:
        gain = np.mean([(r["coarse"] - r["fine"]) / r["coarse"] for r in merged])
        not_worse = sum(r["fine"] <= r["coarse"] for r in merged)
        print(f"merged {len(merged)}/{len(rows)}; fine <= coarse on {not_worse}; mean gain {100 * gain:.2f}%")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
