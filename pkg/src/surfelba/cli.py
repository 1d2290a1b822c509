"""Command-line entry point.

Subcommands: ``ba``, ``eval-ate``, ``eval-map`` and ``synth``.  Exit codes:
0 success, 2 input error, 3 solver failure, 4 evaluation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from .cloud_io import (
    CLOUD_FORMATS, TRAJECTORY_FORMATS, list_cloud_files, read_cloud, read_trajectory,
    write_cloud, write_surfel_map, write_trajectory,
)
from .config import load_config, parse_lines
from .errors import ConfigError, EvaluationError, GeometryError, InputError, SolverError, SurfelBAError
from .evaluation import ate, map_metrics
from .pipeline import config_dict, records_to_csv, run_bundle_adjustment
from .synthetic import SceneSpec, generate_scene

log = logging.getLogger("surfelba")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_EVAL = 0, 2, 3, 4


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numba
    import scipy

    return {
        "surfelba": __version__, "python": platform.python_version(),
        "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__,
    }


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_ba(args) -> int:
    over = _overrides(args.set)
    for key in ("clouds", "trajectory", "gt_trajectory", "output"):
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    if args.pose_only:
        over["pose_only"] = "true"
    if args.uncertainty is not None:
        over["uncertainty"] = args.uncertainty
    cfg = load_config(args.config, over)
    if cfg.clouds is None or cfg.trajectory is None:
        raise ConfigError("both 'clouds' and 'trajectory' must be set")
    if not os.path.isdir(cfg.clouds):
        raise InputError(f"cloud directory not found: {cfg.clouds}")

    initial = read_trajectory(cfg.trajectory, cfg.trajectory_format)
    files = list_cloud_files(cfg.clouds, cfg.cloud_format)
    if len(files) != len(initial):
        raise InputError(f"{len(files)} clouds in {cfg.clouds} but {len(initial)} poses in {cfg.trajectory}")
    clouds = [read_cloud(p, cfg.cloud_format, timestamp=t, scan_id=k)
              for k, (p, t) in enumerate(zip(files, initial.timestamps))]
    gt = read_trajectory(cfg.gt_trajectory, cfg.gt_format) if cfg.gt_trajectory else None

    ba_cfg = cfg.ba_config()
    result = run_bundle_adjustment(clouds, initial, ba_cfg, gt=gt)

    os.makedirs(cfg.output, exist_ok=True)
    write_trajectory(result.trajectory, os.path.join(cfg.output, "trajectory.tum"), "tum")
    write_surfel_map(result.surfels, os.path.join(cfg.output, "surfels.ply"))
    with open(os.path.join(cfg.output, "iterations.csv"), "w") as f:
        f.write(records_to_csv(result.records))
    inputs = {p: sha256(p) for p in files + [cfg.trajectory] + ([cfg.gt_trajectory] if gt else [])}
    manifest = {
        "command": "ba",
        "config_text": cfg.to_text(),
        "solver_config": config_dict(ba_cfg),
        "inputs": inputs,
        "versions": versions(),
        "converged": result.converged,
        "iterations": result.iterations,
    }
    with open(os.path.join(cfg.output, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    last = result.records[-1]
    print(f"iterations {result.iterations} converged {str(result.converged).lower()} "
          f"cost {last.total_cost:.9g} surfels {len(result.surfels)}")
    if last.ate_rms is not None:
        print(f"ate_rms {last.ate_rms:.9f}")
    if not result.converged:
        log.warning("outer loop hit its cap of %d iterations before the cost settled", ba_cfg.outer_iterations)
    return EXIT_OK


def cmd_eval_ate(args) -> int:
    est = read_trajectory(args.estimate, args.est_format)
    gt = read_trajectory(args.ground_truth, args.gt_format)
    res = ate(est, gt, args.max_dt)
    print(f"rms {res.rms:.9f}")
    print(f"max {res.max:.9f}")
    print(f"matched {res.matched_pose_count}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("rms,max,matched_pose_count\n")
            f.write(f"{res.rms:.9g},{res.max:.9g},{res.matched_pose_count}\n")
    return EXIT_OK


def _guess_format(path, given):
    if given:
        return given
    ext = os.path.splitext(path)[1].lower()
    return {".bin": "kitti-bin", ".ply": "ply", ".xyz": "xyz-text", ".txt": "xyz-text"}.get(ext, "ply")


def cmd_eval_map(args) -> int:
    est = read_cloud(args.map, _guess_format(args.map, args.map_format))
    gt = read_cloud(args.ground_truth, _guess_format(args.ground_truth, args.gt_format))
    rep = map_metrics(est.points, gt.points, args.overlap, args.f_threshold)
    print(f"accuracy_cm {rep.accuracy:.6f}")
    print(f"completion_cm {rep.completion:.6f}")
    print(f"chamfer_l1_cm {rep.chamfer_l1:.6f}")
    print(f"f_score_pct {rep.f_score:.6f}")
    print(f"precision_pct {rep.precision:.6f}")
    print(f"recall_pct {rep.recall:.6f}")
    if args.csv:
        names = [f.name for f in fields(rep)]
        with open(args.csv, "w") as f:
            f.write(",".join(names) + "\n")
            f.write(",".join(f"{getattr(rep, n):.9g}" for n in names) + "\n")
    return EXIT_OK


def load_scene_spec(path) -> SceneSpec:
    """Flat ``key = value`` scene file over the fields of :class:`SceneSpec`.

    Tuples are comma separated; ``boxes`` takes ``;``-separated groups of six
    numbers (min corner, max corner).  Angles are radians.
    """
    spec = SceneSpec()
    if path is None:
        return spec
    try:
        with open(path) as f:
            raw = parse_lines(f, source=path)
    except FileNotFoundError:
        raise ConfigError(f"scene file not found: {path}") from None
    kinds = {f.name: f.default for f in fields(SceneSpec) if f.name != "boxes"}
    for key, value in raw.items():
        try:
            if key == "boxes":
                boxes = []
                for grp in filter(None, (g.strip() for g in value.split(";"))):
                    v = [float(x) for x in grp.split(",")]
                    if len(v) != 6:
                        raise ValueError
                    boxes.append((tuple(v[:3]), tuple(v[3:])))
                spec.boxes = boxes
            elif key not in kinds:
                raise ConfigError(f"{path}: unknown scene key {key!r}")
            elif isinstance(kinds[key], tuple):
                setattr(spec, key, tuple(float(x) for x in value.split(",")))
            elif isinstance(kinds[key], int):
                setattr(spec, key, int(value))
            else:
                setattr(spec, key, float(value))
        except ValueError:
            raise ConfigError(f"{path}: cannot parse {key} = {value!r}") from None
    return spec


def cmd_synth(args) -> int:
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    scene = generate_scene(spec)
    out = args.out_dir
    os.makedirs(os.path.join(out, "clouds"), exist_ok=True)
    for c in scene.clouds:
        write_cloud(c.points, os.path.join(out, "clouds", f"{c.scan_id:06d}.bin"), "kitti-bin")
    write_trajectory(scene.gt_trajectory, os.path.join(out, "gt.tum"), "tum")
    write_trajectory(scene.initial_trajectory, os.path.join(out, "init.tum"), "tum")
    write_cloud(scene.gt_map_points, os.path.join(out, "gt_map.ply"), "ply")
    print(f"wrote {len(scene.clouds)} scans to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfelba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("ba", help="refine a trajectory and build a surfel map")
    b.add_argument("--config", help="flat key=value config file")
    b.add_argument("--clouds")
    b.add_argument("--trajectory")
    b.add_argument("--gt-trajectory", dest="gt_trajectory")
    b.add_argument("--output")
    b.add_argument("--pose-only", action="store_true")
    b.add_argument("--uncertainty", choices=["on", "off"])
    b.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    b.set_defaults(func=cmd_ba)

    a = sub.add_parser("eval-ate", help="absolute trajectory error after Horn alignment")
    a.add_argument("estimate")
    a.add_argument("ground_truth")
    a.add_argument("--est-format", default="tum", choices=TRAJECTORY_FORMATS)
    a.add_argument("--gt-format", default="tum", choices=TRAJECTORY_FORMATS)
    a.add_argument("--max-dt", type=float, default=0.05)
    a.add_argument("--csv")
    a.set_defaults(func=cmd_eval_ate)

    m = sub.add_parser("eval-map", help="accuracy, completion, Chamfer-L1 and F-score")
    m.add_argument("map")
    m.add_argument("ground_truth")
    m.add_argument("--map-format", choices=CLOUD_FORMATS)
    m.add_argument("--gt-format", choices=CLOUD_FORMATS)
    m.add_argument("--overlap", type=float, default=1.0)
    m.add_argument("--f-threshold", type=float, default=0.2)
    m.add_argument("--csv")
    m.set_defaults(func=cmd_eval_map)

    s = sub.add_parser("synth", help="generate a synthetic box-world dataset")
    s.add_argument("out_dir")
    s.add_argument("--spec", help="flat key=value scene file")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except GeometryError as exc:
        # degenerate alignment while evaluating is an evaluation failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL if args.command.startswith("eval") else EXIT_SOLVER
    except SurfelBAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
