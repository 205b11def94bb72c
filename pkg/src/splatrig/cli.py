"""Command line front end.

Subcommands mirror the pipeline stages so each step can run alone:
synth, calibrate, fuse, train, render, eval, replay, serve.  Exit code
0 means success, 2 a validation problem (bad manifest, bad config, bad
arguments), 3 a stage failure at runtime.  Set SPLATRIG_LOG_LEVEL to
DEBUG/INFO/WARNING to change verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3

log = logging.getLogger("splatrig")


def _setup_logging() -> None:
    level = os.environ.get("SPLATRIG_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .scenegen import SyntheticSpec, generate_dataset

    spec = SyntheticSpec(
        n_timestamps=args.timestamps,
        pixel_noise=args.pixel_noise,
        depth_noise=args.depth_noise,
        seed=args.seed,
    )
    outdir = generate_dataset(spec, args.out)
    print(f"wrote synthetic dataset to {outdir}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .calibration import calibrate_rig, load_wand_observations, WandSpec
    from .geometry import load_rig, save_rig

    obs = load_wand_observations(args.wand)
    rig = load_rig(args.intrinsics)
    spec = WandSpec(args.d_ab, args.d_bc, args.d_ab + args.d_bc)
    intrinsics = {c.id: c.intrinsics for c in rig}
    report = calibrate_rig(obs, spec, intrinsics, seed=args.seed)
    save_rig(report.rig, args.out)
    print(
        f"calibrated {len(report.rig)} cameras: "
        f"mean reprojection {report.mean_reprojection_px:.4f} px, "
        f"scale factor {report.scale_factor:.6f}"
    )
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .pipeline import load_manifest, load_config, PipelineConfig, prepare
    from .splats import save_scene

    manifest = load_manifest(args.dataset)
    config = load_config(args.config) if args.config else PipelineConfig()
    prep = prepare(manifest, config, timestamp=args.timestamp)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(prep.init_scene, out)
    print(
        f"fused {len(prep.cloud_full)} points -> "
        f"{prep.init_scene.count} Gaussians -> {out}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import load_config, load_manifest, PipelineConfig, run_pipeline

    manifest = load_manifest(args.dataset)
    config = load_config(args.config) if args.config else PipelineConfig()
    result = run_pipeline(
        manifest, config, timestamp=args.timestamp, outdir=args.out
    )
    line = f"trained {result.scene.count} Gaussians"
    if result.metrics is not None:
        line += (
            f"; holdout PSNR {result.metrics.psnr_mean:.2f} dB "
            f"SSIM {result.metrics.ssim_mean:.4f}"
        )
    if result.scene_path is not None:
        line += f"; scene at {result.scene_path}"
    print(line)
    return EXIT_OK


def cmd_render(args) -> int:
    from .geometry import load_rig
    from .images import save_png
    from .splats import RenderSettings, load_scene, rasterize

    scene = load_scene(args.scene)
    rig = load_rig(args.rig)
    if args.camera not in rig:
        print(f"camera {args.camera!r} not in rig", file=sys.stderr)
        return EXIT_VALIDATION
    out = rasterize(scene, rig[args.camera], RenderSettings())
    save_png(out.color, args.out)
    print(f"rendered {args.camera} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import run_suite
    from .pipeline import load_config, PipelineConfig

    config = load_config(args.config) if args.config else PipelineConfig()
    rows = run_suite(args.dataset, config, outdir=args.out)
    for row in rows:
        if row.get("error"):
            print(f"{row['variant']}: ERROR {row['error']}")
        else:
            print(
                f"{row['variant']}: PSNR {row['psnr_mean']:.2f} "
                f"SSIM {row['ssim_mean']:.4f} ({row['runtime_s']:.0f}s)"
            )
    return EXIT_OK


def cmd_replay(args) -> int:
    from .pipeline import export_replay

    scene_paths = {}
    for item in args.scene:
        if "=" in item:
            t_str, path = item.split("=", 1)
            scene_paths[int(t_str)] = path
        else:
            scene_paths[len(scene_paths)] = item
    out = export_replay(
        scene_paths,
        args.trajectory,
        args.out,
        rig_path=args.rig,
        prebake=args.prebake,
    )
    print(f"replay bundle at {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import functools
    from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer

    directory = Path(args.bundle).resolve()
    if not directory.is_dir():
        print(f"not a directory: {directory}", file=sys.stderr)
        return EXIT_VALIDATION
    handler = functools.partial(SimpleHTTPRequestHandler, directory=str(directory))
    server = ThreadingHTTPServer(("127.0.0.1", args.port), handler)
    print(f"serving {directory} at http://127.0.0.1:{args.port}/ (ctrl-c stops)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("stopped")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="splatrig",
        description="Multi-camera Gaussian-splat scene reconstruction toolkit.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--timestamps", type=int, default=1)
    s.add_argument("--pixel-noise", type=float, default=0.3, dest="pixel_noise")
    s.add_argument("--depth-noise", type=float, default=0.0, dest="depth_noise")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="calibrate a rig from wand sweeps")
    s.add_argument("--wand", required=True, help="wand observations (JSONL)")
    s.add_argument("--intrinsics", required=True, help="rig JSON providing intrinsics")
    s.add_argument("--out", required=True, help="output rig JSON")
    s.add_argument("--d-ab", type=float, default=0.2, dest="d_ab")
    s.add_argument("--d-bc", type=float, default=0.4, dest="d_bc")
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("fuse", help="fuse depth into an initialized scene")
    s.add_argument("--dataset", required=True, help="dataset dir or manifest.json")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--timestamp", type=int, default=0)
    s.add_argument("--out", required=True, help="output EGSP scene file")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("train", help="run the full pipeline for one timestamp")
    s.add_argument("--dataset", required=True, help="dataset dir or manifest.json")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--timestamp", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a scene from a rig camera")
    s.add_argument("--scene", required=True, help="EGSP scene file")
    s.add_argument("--rig", required=True, help="rig JSON")
    s.add_argument("--camera", required=True, help="camera id")
    s.add_argument("--out", required=True, help="output PNG")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="run the variant comparison suite")
    s.add_argument("--dataset", required=True, help="dataset dir or manifest.json")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--out", help="directory for suite.csv / suite.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("replay", help="assemble a viewer replay bundle")
    s.add_argument(
        "--scene",
        action="append",
        required=True,
        help="EGSP file, or T=path to bind timestamp T (repeatable)",
    )
    s.add_argument("--trajectory", required=True, help="trajectory JSON")
    s.add_argument("--rig", help="rig JSON to embed")
    s.add_argument("--prebake", action="store_true", help="render trajectory frames")
    s.add_argument("--out", required=True, help="output bundle directory")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("serve", help="serve a replay bundle over HTTP")
    s.add_argument("--bundle", required=True, help="bundle directory")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)

    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad arguments already; normalize other codes
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK

    from .pipeline import ConfigError, ManifestError, StageError

    try:
        return args.func(args)
    except (ManifestError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
