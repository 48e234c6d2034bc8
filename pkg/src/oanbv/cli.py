"""Command-line entry point.

Commands: run (method comparison), sweep (evaluator weight grid), ablate
(alignment | viewpoints), scene (dump one generated scene). A JSON config can
seed any command; command-line flags win. Exit codes: 0 ok, 2 config error,
3 generation error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict

from . import fileio
from .config import METHODS, ConfigError, RunConfig
from .experiments import (GEN_BAND, ablation_alignment, ablation_viewpoint_gen,
                          aggregate, run_suite, weight_sweep)
from .scene import SceneGenerationError, generate_scene, render_observation
from .elevation import build_elevation_map

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION = 0, 2, 3
PKG_VERSION = "0.1.0"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--family", choices=["indoor", "outdoor", "both"])
    p.add_argument("--stride", type=int, help="observation ray stride")
    p.add_argument("--weights", help="w_v,w_a,w_o (must sum to 1)")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oanbv",
                                 description="occlusion-aware next-best-view simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="iterative NBV method comparison")
    _add_common(p)
    p.add_argument("--methods", help=f"comma list from: {','.join(METHODS)}")
    p.add_argument("--scenes", type=int, help="scenes per family")
    p.add_argument("--iterations", type=int, help="NBV steps per trial")

    p = sub.add_parser("sweep", help="evaluator weight grid sweep")
    _add_common(p)
    p.add_argument("--trials", type=int, help="sweep trials")
    p.add_argument("--grid-step", type=float, dest="grid_step")

    p = sub.add_parser("ablate", help="ablation studies")
    p.add_argument("which", choices=["alignment", "viewpoints"])
    _add_common(p)
    p.add_argument("--seeds", type=int, help="seeds for the alignment ablation")
    p.add_argument("--trials", type=int, help="trials per setting for viewpoints")

    p = sub.add_parser("scene", help="generate and dump one scene")
    _add_common(p)
    p.add_argument("--observation", action="store_true",
                   help="also export the spawn-view observation (PLY + PGM)")
    return ap


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    d = asdict(cfg)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    if getattr(args, "family", None):
        d["family"] = args.family
    if getattr(args, "stride", None):
        d["stride"] = args.stride
    if getattr(args, "weights", None):
        try:
            parts = [float(x) for x in args.weights.split(",")]
        except ValueError as e:
            raise ConfigError(f"bad --weights value {args.weights!r}") from e
        if len(parts) != 3:
            raise ConfigError("--weights needs exactly three values w_v,w_a,w_o")
        d["weights"] = parts
    if getattr(args, "methods", None):
        d["methods"] = args.methods.split(",")
    if getattr(args, "scenes", None):
        d["scenes"] = args.scenes
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    if getattr(args, "trials", None):
        if args.command == "sweep":
            d["sweep_trials"] = args.trials
        else:
            d["ablate_trials"] = args.trials
    if getattr(args, "grid_step", None):
        d["grid_step"] = args.grid_step
    if getattr(args, "seeds", None):
        d["ablate_seeds"] = args.seeds
    return RunConfig.from_dict(d)


def _manifest(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    payload = {"command": command, "version": PKG_VERSION, "config": cfg.to_dict(),
               "occlusion_band": list(GEN_BAND)}
    if extra:
        payload.update(extra)
    return payload


def cmd_run(cfg: RunConfig, out: str) -> int:
    records = run_suite(cfg)
    os.makedirs(out, exist_ok=True)
    fileio.write_trials_csv(os.path.join(out, "trials.csv"), records)
    rows = aggregate(records)
    fileio.write_aggregate_csv(os.path.join(out, "aggregate.csv"), rows)
    n_failed = sum(1 for r in records if not r.iterations)
    fileio.write_manifest(os.path.join(out, "manifest.json"),
                          _manifest(cfg, "run", {"n_records": len(records),
                                                 "n_generation_failures": n_failed}))
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: str) -> int:
    cells, best, used = weight_sweep(cfg)
    os.makedirs(out, exist_ok=True)
    fileio.write_sweep_csvs(os.path.join(out, "sweep_grid.csv"),
                            os.path.join(out, "sweep_cells.csv"), cells, cfg.grid_step)
    fileio.write_manifest(os.path.join(out, "manifest.json"),
                          _manifest(cfg, "sweep", {
                              "trials_used": used,
                              "argmax": {"w_o": best.w_o, "w_a": best.w_a,
                                         "w_v": best.w_v, "snr": best.snr},
                          }))
    return EXIT_OK


def cmd_ablate(which: str, cfg: RunConfig, out: str) -> int:
    os.makedirs(out, exist_ok=True)
    if which == "alignment":
        rows = ablation_alignment(cfg)
        fileio.write_dict_csv(os.path.join(out, "ablation_alignment.csv"), rows,
                              ["seed", "mpvpe_part", "mpvpe_full",
                               "flags_part", "flags_full"])
    else:
        rows = ablation_viewpoint_gen(cfg)
        fileio.write_dict_csv(os.path.join(out, "ablation_viewpoints.csv"), rows,
                              ["setting", "scene_seed", "sampler", "success",
                               "inside_obstacle", "lost_los"])
    fileio.write_manifest(os.path.join(out, "manifest.json"),
                          _manifest(cfg, f"ablate:{which}", {"rows": len(rows)}))
    return EXIT_OK


def cmd_scene(cfg: RunConfig, out: str, with_observation: bool) -> int:
    family = "indoor" if cfg.family == "both" else cfg.family
    scene = generate_scene(family, cfg.seed, occlusion_band=GEN_BAND)
    os.makedirs(out, exist_ok=True)
    fileio.write_scene_json(os.path.join(out, "scene.json"), scene)
    fileio.write_obj(os.path.join(out, "target.obj"), scene.target)
    cam = scene.spawn_camera()
    emap = build_elevation_map(scene, scene.spawn, cam)
    fileio.write_elevation_csv(os.path.join(out, "elevation.csv"),
                               os.path.join(out, "elevation_valid.csv"), emap)
    if with_observation:
        obs = render_observation(scene, cam, cfg.intrinsics(), cfg.stride, cfg.max_range)
        fileio.export_observation(out, "spawn", obs)
    fileio.write_manifest(os.path.join(out, "manifest.json"), _manifest(cfg, "scene"))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            return cmd_run(cfg, args.out)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out)
        if args.command == "ablate":
            return cmd_ablate(args.which, cfg, args.out)
        if args.command == "scene":
            return cmd_scene(cfg, args.out, args.observation)
    except SceneGenerationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GENERATION
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
