"""Command-line entry point: ``gridmerge {synth,pairwise,merge,eval,render}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from .errors import FormatError, GraphDisconnected, GridMergeError, InfeasibleParams, ResolutionMismatch
from .gridmap import OccupancyGrid, load_grid, render_merged, save_grid
from .motion import Motion2D
from .pairwise import MapFeatures, pairwise_merge
from .pipeline import MergeConfig, MergeReport, evaluate_vs_ground_truth, merge_multiple, regauge
from .synth import SynthParams, generate_synthetic

log = logging.getLogger("gridmerge")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INFEASIBLE = 2
EXIT_DISCONNECTED = 3
EXIT_REJECTED = 4
EXIT_USAGE = 64
EXIT_SCHEMA = 65


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dump_json(obj), encoding="utf-8")


def _optional_float(text: str) -> float | None:
    if text.lower() in ("none", "off"):
        return None
    return float(text)


def _config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("merge configuration (override --config)")
    group.add_argument("--config", type=Path, help="flat JSON file of configuration fields")
    group.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    group.add_argument("--threads", type=int, dest="thread_count", help="worker thread hint")
    for key, default in MergeConfig().to_dict().items():
        if key in ("master_seed", "thread_count"):
            continue
        kind = _optional_float if default is None or key == "max_conflict" else type(default)
        group.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, metavar=key.upper())


def build_config(args) -> MergeConfig:
    """Defaults, then the config file, then command-line flags."""
    values = MergeConfig().to_dict()
    if args.config is not None:
        try:
            from_file = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliFailure(EXIT_IO, f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliFailure(EXIT_SCHEMA, f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(from_file, dict):
            raise CliFailure(EXIT_SCHEMA, f"{args.config}: expected a JSON object")
        values.update(from_file)
        try:
            MergeConfig.from_dict(values)
        except (KeyError, TypeError, ValueError) as exc:
            raise CliFailure(EXIT_SCHEMA, f"{args.config}: {exc}") from exc
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        return MergeConfig.from_dict(values)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliFailure(EXIT_USAGE, str(exc)) from exc


def map_paths(inputs: list[Path]) -> list[Path]:
    """Expand a single directory into its ``*.pgm`` files (sorted, merged output skipped)."""
    if len(inputs) == 1 and inputs[0].is_dir():
        paths = sorted(p for p in inputs[0].glob("*.pgm") if p.name != "merged.pgm")
        if not paths:
            raise CliFailure(EXIT_IO, f"{inputs[0]}: no .pgm files")
        return paths
    return list(inputs)


def load_maps(paths: list[Path]) -> list[OccupancyGrid]:
    grids = []
    for path in paths:
        try:
            grids.append(load_grid(path))
        except OSError as exc:
            raise CliFailure(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from exc
        except FormatError as exc:
            raise CliFailure(EXIT_IO, str(exc)) from exc
    return grids


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot create {path}: {exc}") from exc
    return path


def _dump_features(out: Path, grids, feats) -> None:
    target = _out_dir(out / "features")
    for grid, f in zip(grids, feats):
        write_json(
            target / f"{grid.name}.json",
            {
                "name": grid.name,
                "n_keypoints": len(f.keypoints),
                "n_edge_points": len(f.edges),
                "keypoints": [k.to_dict() for k in f.keypoints],
            },
        )


def _compute_features(grids) -> list[MapFeatures]:
    try:
        return [MapFeatures.from_grid(g) for g in grids]
    except GridMergeError as exc:
        raise CliFailure(EXIT_SCHEMA, str(exc)) from exc


def cmd_synth(args) -> int:
    if args.n < 2:
        raise CliFailure(EXIT_USAGE, "--n must be at least 2")
    params = SynthParams(
        n_maps=args.n,
        world_size=args.world_size,
        window_size=args.window_size,
        room_count=args.room_count,
        min_overlap=args.min_overlap,
        noise=args.noise,
        rotation_range=args.rotation_range,
        resolution=args.resolution,
    )
    try:
        world, grids = generate_synthetic(params, args.seed)
    except InfeasibleParams as exc:
        raise CliFailure(EXIT_INFEASIBLE, str(exc)) from exc
    out = _out_dir(args.out)
    files = []
    try:
        for grid in grids:
            save_grid(grid, out / f"{grid.name}.pgm")
            files.append(f"{grid.name}.pgm")
        truth = {
            "motions": [m.to_dict(k) for k, m in enumerate(world.motions)],
            "names": [g.name for g in grids],
            "windows": [list(w) for w in world.windows],
            "seed": args.seed,
            "params": dataclasses.asdict(params),
        }
        write_json(out / "ground_truth.json", truth)
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    if args.json:
        sys.stdout.write(dump_json({"out": str(out), "maps": files, "ground_truth": "ground_truth.json"}))
    else:
        print(f"wrote {len(files)} maps and ground_truth.json to {out}")
    return EXIT_OK


def cmd_pairwise(args) -> int:
    cfg = build_config(args)
    grids = load_maps([args.map_p, args.map_q])
    feats = _compute_features(grids)
    if args.dump_features:
        _dump_features(_out_dir(args.out), grids, feats)
    diag: dict = {}
    try:
        est = pairwise_merge(grids[0], grids[1], args.i, args.j, cfg.pairwise_params(), feats[0], feats[1], diag)
    except ResolutionMismatch as exc:
        raise CliFailure(EXIT_SCHEMA, str(exc)) from exc
    if est is None:
        status = f"rejected: {diag.get('stage', 'unknown')}"
        if args.json:
            sys.stdout.write(dump_json({"status": status, "i": args.i, "j": args.j, "inliers": diag.get("inliers")}))
        else:
            print(status)
        return EXIT_REJECTED
    if args.json:
        sys.stdout.write(dump_json(dict(status="ok", **est.to_dict())))
    else:
        m = est.motion
        print(
            f"M_{args.i}{args.j}: theta={m.theta:.6f} rad  t=({m.tx:.3f}, {m.ty:.3f}) cells  "
            f"inliers={est.inliers}  overlap={est.overlap:.3f}  objective={est.objective:.6g}"
        )
    return EXIT_OK


def _graph_dump(report: MergeReport) -> dict:
    return {
        "n_maps": report.n_maps,
        "e_best": report.e_best,
        "components": report.components,
        "edges": [p.to_dict() for p in report.pairs if p.estimate is not None],
    }


def _summary(report: MergeReport) -> str:
    lines = [
        f"maps: {report.n_maps}  pairs ok: {report.pairwise_succeeded}/{report.pairwise_attempted}  "
        f"E_best: {report.e_best}",
    ]
    if report.success:
        lines.append(
            f"merging error: coarse {report.coarse_error:.4f}  fine {report.fine_error:.4f} cells  "
            f"converged: {report.converged}"
        )
        for k, m in enumerate(report.motions_fine):
            lines.append(f"  map {k}: theta={m.theta:+.6f}  t=({m.tx:+.3f}, {m.ty:+.3f})")
    return "\n".join(lines)


def cmd_merge(args) -> int:
    cfg = build_config(args)
    grids = load_maps(map_paths(args.maps))
    if len(grids) < 2:
        raise CliFailure(EXIT_USAGE, "need at least 2 maps")
    out = _out_dir(args.out)
    feats = None
    if args.dump_features:
        feats = _compute_features(grids)
        _dump_features(out, grids, feats)
    code = EXIT_OK
    merged = None
    try:
        merged, report = merge_multiple(grids, cfg, feats)
    except GraphDisconnected as exc:
        report = exc.report
        stray = [c for c in exc.components if 0 not in c]
        log.error("cannot merge maps %s: graph components %s", sorted(k for c in stray for k in c), exc.components)
        code = EXIT_DISCONNECTED
    except ResolutionMismatch as exc:
        raise CliFailure(EXIT_SCHEMA, str(exc)) from exc
    except GridMergeError as exc:
        raise CliFailure(EXIT_SCHEMA, str(exc)) from exc
    if report.success and not report.converged:
        log.warning("motion averaging did not converge; result written anyway")
    try:
        if merged is not None:
            save_grid(merged, out / "merged.pgm")
        write_json(out / "report.json", report.to_dict())
        if args.dump_graph:
            write_json(out / "graph.json", _graph_dump(report))
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    if args.json:
        sys.stdout.write(dump_json(report.to_dict()))
    else:
        print(_summary(report))
    return code


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CliFailure(EXIT_SCHEMA, f"{path}: invalid JSON ({exc})") from exc


def _motions(doc, key: str, path: Path) -> list[Motion2D]:
    try:
        items = doc[key]
        motions = [Motion2D.from_dict(d) for d in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliFailure(EXIT_SCHEMA, f"{path}: missing or malformed '{key}'") from exc
    if not motions:
        raise CliFailure(EXIT_SCHEMA, f"{path}: '{key}' is empty (did the merge fail?)")
    if not all(math.isfinite(v) for m in motions for v in (m.theta, m.tx, m.ty)):
        raise CliFailure(EXIT_SCHEMA, f"{path}: non-finite motion values")
    return motions


def _aligned_truth(report: dict, truth_doc: dict, truth: list[Motion2D], n: int) -> list[Motion2D]:
    """Reorder and re-reference the truth to the report's input order, when names allow it."""
    names = [d.get("name") for d in report.get("inputs", []) if isinstance(d, dict)]
    truth_names = truth_doc.get("names")
    if truth_names and len(names) == n and all(nm in truth_names for nm in names):
        return regauge(truth, [truth_names.index(nm) for nm in names])
    return truth


def cmd_eval(args) -> int:
    report = _read_json(args.report)
    truth_doc = _read_json(args.truth)
    if not isinstance(report, dict) or not isinstance(truth_doc, dict):
        raise CliFailure(EXIT_SCHEMA, "report and ground truth must be JSON objects")
    fine = _motions(report, "motions_fine", args.report)
    coarse = _motions(report, "motions_coarse", args.report)
    truth = _aligned_truth(report, truth_doc, _motions(truth_doc, "motions", args.truth), len(fine))
    if not (len(fine) == len(coarse) == len(truth)):
        raise CliFailure(EXIT_SCHEMA, f"report has {len(fine)} motions, ground truth {len(truth)}")
    result = {"fine": evaluate_vs_ground_truth(fine, truth), "coarse": evaluate_vs_ground_truth(coarse, truth)}
    if args.json:
        sys.stdout.write(dump_json(result))
        return EXIT_OK
    print(f"{'map':>4} {'rot fine':>12} {'trans fine':>12} {'rot coarse':>12} {'trans coarse':>12}")
    for f, c in zip(result["fine"]["per_map"], result["coarse"]["per_map"]):
        print(
            f"{f['index']:>4} {f['rotation_error']:12.6f} {f['translation_error']:12.4f} "
            f"{c['rotation_error']:12.6f} {c['translation_error']:12.4f}"
        )
    for stage in ("fine", "coarse"):
        r = result[stage]
        print(
            f"{stage:>6}: max rot {r['max_rotation_error']:.6f} rad  max trans {r['max_translation_error']:.4f} cells"
            f"  (mean {r['mean_rotation_error']:.6f} / {r['mean_translation_error']:.4f})"
        )
    return EXIT_OK


def cmd_render(args) -> int:
    report = _read_json(args.report)
    if not isinstance(report, dict):
        raise CliFailure(EXIT_SCHEMA, f"{args.report}: expected a JSON object")
    motions = _motions(report, "motions_fine", args.report)
    grids = load_maps(map_paths(args.maps))
    inputs = report.get("inputs") or []
    listed = [(d.get("name"), d.get("width"), d.get("height")) for d in inputs if isinstance(d, dict)]
    given = [(g.name, g.width, g.height) for g in grids]
    if len(motions) != len(grids) or (listed and listed != given):
        raise CliFailure(EXIT_SCHEMA, "map set does not match the report's inputs")
    try:
        merged = render_merged(grids, motions)
    except GridMergeError as exc:
        raise CliFailure(EXIT_SCHEMA, str(exc)) from exc
    out = _out_dir(args.out)
    try:
        save_grid(merged, out / "merged.pgm")
    except OSError as exc:
        raise CliFailure(EXIT_IO, f"cannot write to {out}: {exc}") from exc
    if args.json:
        sys.stdout.write(dump_json({"merged": str(out / "merged.pgm"), "width": merged.width, "height": merged.height}))
    else:
        print(f"wrote {out / 'merged.pgm'} ({merged.width}x{merged.height})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridmerge", description="Merge multiple occupancy grid maps.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more diagnostics on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--n", type=int, default=6, help="number of submaps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    defaults = SynthParams()
    p.add_argument("--world-size", type=int, default=defaults.world_size)
    p.add_argument("--window-size", type=int, default=defaults.window_size)
    p.add_argument("--room-count", type=int, default=defaults.room_count)
    p.add_argument("--min-overlap", type=float, default=defaults.min_overlap)
    p.add_argument("--noise", type=float, default=defaults.noise, help="cell flip probability")
    p.add_argument("--rotation-range", type=float, default=defaults.rotation_range, help="radians")
    p.add_argument("--resolution", type=float, default=defaults.resolution, help="meters per cell")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pairwise", help="estimate the relative motion of two maps")
    p.add_argument("map_p", type=Path)
    p.add_argument("map_q", type=Path)
    p.add_argument("--i", type=int, default=0, help="index of the first map")
    p.add_argument("--j", type=int, default=1, help="index of the second map")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--json", action="store_true")
    p.add_argument("--dump-features", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_pairwise)

    p = sub.add_parser("merge", help="merge maps (files or one directory)")
    p.add_argument("maps", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--json", action="store_true")
    p.add_argument("--dump-features", action="store_true")
    p.add_argument("--dump-graph", action="store_true")
    _config_flags(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="compare a merge report with ground truth")
    p.add_argument("report", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="re-render merged.pgm from a report")
    p.add_argument("report", type=Path)
    p.add_argument("maps", type=Path, nargs="+")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"gridmerge: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
