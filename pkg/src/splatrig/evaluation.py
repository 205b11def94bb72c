"""Image metrics and the evaluation protocols built on them.

Covers per-view PSNR/SSIM, temporal stability over rendered
sequences, a luminance-plus-structure flicker score, circular orbit
trajectories, the point-cloud reprojection baseline, and the
four-variant comparison suite.  Heavy orchestration (training the
variants) lives in the pipeline module and is imported lazily so this
module stays usable for plain metric math.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, Intrinsics, Pose, look_at
from .splats import GaussianScene, RenderSettings, rasterize
from .stereo import FusedPointCloud
from .training import ssim

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


@dataclass
class Trajectory:
    """An ordered camera path; kind is orbit, egocentric, or custom."""

    poses: list[Camera]
    kind: str = "custom"

    def __post_init__(self) -> None:
        if self.kind not in ("orbit", "egocentric", "custom"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


@dataclass
class MetricReport:
    """Per-view and aggregate image metrics for one evaluation run."""

    per_view: dict[str, dict[str, float]] = field(default_factory=dict)
    psnr_mean: float = float("nan")
    psnr_std: float = float("nan")
    ssim_mean: float = float("nan")
    ssim_std: float = float("nan")
    t_psnr: float | None = None
    t_ssim: float | None = None
    flicker: float | None = None
    runtime_s: float = 0.0
    fps: float = 0.0

    def to_dict(self) -> dict:
        return {
            "per_view": self.per_view,
            "psnr_mean": self.psnr_mean,
            "psnr_std": self.psnr_std,
            "ssim_mean": self.ssim_mean,
            "ssim_std": self.ssim_std,
            "t_psnr": self.t_psnr,
            "t_ssim": self.t_ssim,
            "flicker": self.flicker,
            "runtime_s": self.runtime_s,
            "fps": self.fps,
        }


def score_views(
    pairs: dict[str, tuple[np.ndarray, np.ndarray]], runtime_s: float = 0.0
) -> MetricReport:
    """PSNR/SSIM per named (rendered, target) pair plus mean and std."""
    per_view = {}
    ps, ss = [], []
    for name, (rendered, target) in pairs.items():
        p = psnr(rendered, target)
        s = ssim(rendered, target)
        per_view[name] = {"psnr": p, "ssim": s}
        ps.append(p)
        ss.append(s)
    n = max(len(pairs), 1)
    return MetricReport(
        per_view=per_view,
        psnr_mean=float(np.mean(ps)) if ps else float("nan"),
        psnr_std=float(np.std(ps)) if ps else float("nan"),
        ssim_mean=float(np.mean(ss)) if ss else float("nan"),
        ssim_std=float(np.std(ss)) if ss else float("nan"),
        runtime_s=runtime_s,
        fps=n / runtime_s if runtime_s > 0 else 0.0,
    )


def temporal_metrics(frames: list[np.ndarray]) -> tuple[float, float]:
    """Mean PSNR and SSIM over consecutive frame pairs, no alignment."""
    if len(frames) < 2:
        raise ValueError("temporal metrics need at least 2 frames")
    ps = [psnr(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]
    ss = [ssim(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]
    return float(np.mean(ps)), float(np.mean(ss))


def flicker(frames: list[np.ndarray]) -> float:
    """Frame-to-frame instability in luminance and structure.

    Mean over consecutive pairs of half the absolute mean-luminance
    change plus half the SSIM deficit.  Exactly zero when and only
    when all frames are identical.
    """
    if len(frames) < 2:
        raise ValueError("flicker needs at least 2 frames")
    vals = []
    for i in range(len(frames) - 1):
        a, b = frames[i], frames[i + 1]
        d_lum = abs(float(np.mean(a)) - float(np.mean(b)))
        vals.append(0.5 * (d_lum + (1.0 - ssim(a, b))))
    return float(np.mean(vals))


def orbit(
    center: np.ndarray,
    radius: float,
    n: int,
    intrinsics: Intrinsics,
    height: float = 1.6,
) -> Trajectory:
    """n cameras equally spaced on a circle, all aimed at `center`.

    The circle lies at z = `height` around the vertical axis through
    the center point; consecutive azimuth step is 2 pi / n.
    """
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    if n < 2:
        raise ValueError("an orbit needs at least 2 poses")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n
        eye = np.array(
            [center[0] + radius * np.cos(az), center[1] + radius * np.sin(az), height]
        )
        cams.append(Camera(intrinsics, look_at(eye, center), id=f"orbit{k:03d}"))
    return Trajectory(cams, kind="orbit")


def render_trajectory(
    scene: GaussianScene,
    trajectory: Trajectory,
    settings: RenderSettings | None = None,
) -> list[np.ndarray]:
    settings = settings or RenderSettings()
    return [rasterize(scene, cam, settings).color for cam in trajectory]


def depth_reprojection_render(
    cloud: FusedPointCloud,
    camera: Camera,
    background: np.ndarray | None = None,
) -> np.ndarray:
    """Z-buffered 1-pixel point splatting of a fused cloud.

    Every cloud point paints the single pixel its projection lands in;
    the nearest point wins; pixels no point hits take the background.
    """
    if len(cloud) == 0:
        raise ValueError("cannot reproject an empty cloud")
    h, w = camera.intrinsics.height, camera.intrinsics.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    image = np.tile(bg, (h, w, 1))

    cam_pts = camera.world_to_camera(cloud.positions)
    z = cam_pts[:, 2]
    front = z > 1e-9
    if not front.any():
        return image
    uv = cam_pts[front, :2] / z[front, None]
    px = np.floor(uv[:, 0] * camera.intrinsics.fx + camera.intrinsics.cx + 0.5).astype(int)
    py = np.floor(uv[:, 1] * camera.intrinsics.fy + camera.intrinsics.cy + 0.5).astype(int)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    if not inside.any():
        return image
    px, py = px[inside], py[inside]
    depth = z[front][inside]
    colors = cloud.colors[front][inside]

    flat = py * w + px
    # nearest point per pixel: sort by (pixel, depth), keep first of each run
    order = np.lexsort((depth, flat))
    flat, colors = flat[order], colors[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    image.reshape(-1, 3)[flat[first]] = colors[first]
    return image


VARIANT_NAMES = (
    "depth_reprojection",
    "baseline_3dgs",
    "no_augment",
    "full",
)

SUITE_COLUMNS = (
    "variant",
    "psnr_mean",
    "psnr_std",
    "ssim_mean",
    "ssim_std",
    "lpips",
    "clip_score",
    "runtime_s",
    "error",
)


def run_suite(
    dataset_dir: str | Path,
    config=None,
    outdir: str | Path | None = None,
    variants: tuple[str, ...] = VARIANT_NAMES,
) -> list[dict]:
    """Evaluate the comparison variants on one dataset.

    Rows come back in the requested order with holdout PSNR/SSIM mean
    and std per variant.  A variant that raises records its error and
    the rest proceed.  LPIPS and CLIP columns stay empty unless an
    external metric plugin is configured on the pipeline config.  With
    `outdir`, writes suite.csv and suite.json.
    """
    from . import pipeline  # heavy import deferred; also avoids a cycle

    for v in variants:
        if v not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANT_NAMES}")

    # The data stages (calibration, depth, fusion, initialization) are
    # identical for every variant, so run them once up front.
    prep = None
    try:
        prep = pipeline.prepare(pipeline.load_manifest(dataset_dir), config)
    except Exception as exc:
        log.warning("shared preparation failed, variants run standalone: %s", exc)

    rows: list[dict] = []
    for variant in variants:
        row = {c: "" for c in SUITE_COLUMNS}
        row["variant"] = variant
        t0 = time.time()
        try:
            report = pipeline.run_variant(dataset_dir, config, variant, prep=prep)
            row["psnr_mean"] = report.psnr_mean
            row["psnr_std"] = report.psnr_std
            row["ssim_mean"] = report.ssim_mean
            row["ssim_std"] = report.ssim_std
        except Exception as exc:
            log.warning("variant %s failed: %s", variant, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["runtime_s"] = round(time.time() - t0, 3)
        rows.append(row)

    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "suite.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SUITE_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        (outdir / "suite.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows


def holdout_protocol(dataset_dir: str | Path, config=None) -> MetricReport:
    """Train the full pipeline and score it on the withheld right views."""
    from . import pipeline

    return pipeline.run_variant(dataset_dir, config, "full")


def load_trajectory(path: str | Path, intrinsics: Intrinsics) -> Trajectory:
    """Read a replay trajectory: a JSON list of {q, t, time} records."""
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list) or not records:
        raise ValueError(f"{path}: expected a non-empty JSON list")
    cams = []
    for i, rec in enumerate(records):
        try:
            pose = Pose(np.asarray(rec["q"], dtype=np.float64),
                        np.asarray(rec["t"], dtype=np.float64))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: record {i} malformed: {exc}") from None
        cams.append(Camera(intrinsics, pose, id=f"traj{i:04d}"))
    return Trajectory(cams, kind="egocentric")


def save_trajectory(trajectory: Trajectory, path: str | Path, fps: float = 30.0) -> None:
    records = [
        {"q": cam.pose.q.tolist(), "t": cam.pose.t.tolist(), "time": i / fps}
        for i, cam in enumerate(trajectory)
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")
