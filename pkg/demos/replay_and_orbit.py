"""Free-viewpoint evaluation of a trained scene.

Loads the scene written by train_splats_end_to_end.py (run that one
first), sweeps an orbit trajectory around the scene center, reports
temporal stability metrics, and exports a replay bundle the browser
viewer can load.
"""

from pathlib import Path

import numpy as np

from splatrig.evaluation import (
    Trajectory,
    flicker,
    orbit,
    render_trajectory,
    save_trajectory,
    temporal_metrics,
)
from splatrig.geometry import Intrinsics
from splatrig.images import save_png
from splatrig.pipeline import export_replay
from splatrig.splats import load_scene

scene_path = Path("/tmp/splatrig_demo_out/scene_t0000.egsp")
if not scene_path.exists():
    raise SystemExit("run train_splats_end_to_end.py first")

scene = load_scene(scene_path)
center = scene.positions.mean(axis=0)
intrinsics = Intrinsics(fx=150.0, fy=150.0, cx=80.0, cy=60.0, width=160, height=120)

trajectory = orbit(center, radius=1.5, n=24, intrinsics=intrinsics, height=1.6)
frames = render_trajectory(scene, trajectory)
print(f"rendered {len(frames)} orbit views")

t_psnr, t_ssim = temporal_metrics(frames)
print(f"consecutive-frame PSNR {t_psnr:.2f} dB, SSIM {t_ssim:.4f}")
print(f"flicker score {flicker(frames):.5f}")

save_png(frames[0], "/tmp/orbit_first.png")
print("wrote /tmp/orbit_first.png")

# Replaying the same pose over time is the degenerate egocentric case:
# a static scene rendered from a fixed head position must not flicker.
static = [frames[0]] * 8
print(f"static-sequence flicker {flicker(static):.1f} (exactly zero)")

save_trajectory(trajectory, "/tmp/orbit_trajectory.json", fps=12.0)
bundle = export_replay(
    {0: scene_path},
    "/tmp/orbit_trajectory.json",
    "/tmp/splatrig_demo_bundle",
)
print(f"replay bundle at {bundle}")
for f in sorted(p.name for p in bundle.iterdir()):
    print(f"  {f}")
