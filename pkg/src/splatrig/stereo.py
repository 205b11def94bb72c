"""Stereo depth, point-cloud fusion and filtering.

Turns synchronized stereo pairs into a single colored world-frame point
cloud: block matching -> disparity -> depth -> unprojection -> merge ->
voxel downsample -> statistical outlier removal.  Real depth maps can be
ingested directly through the EGDP binary format instead of the built-in
block matcher.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import CameraRig, unproject_many

logger = logging.getLogger(__name__)

EGDP_MAGIC = b"EGDP"

# Depths beyond this are disparity-noise explosions near zero disparity.
Z_MAX_DEFAULT = 8.0


class ConfigurationError(ValueError):
    """A depth map references a camera the rig does not contain."""


@dataclass
class DepthMap:
    """Per-pixel metric depth for one camera at one frame; 0 = invalid."""

    values: np.ndarray  # (H, W) float32/float64 meters
    camera: str
    frame: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if not np.all(np.isfinite(v)):
            raise ValueError("depth map contains non-finite values")
        if np.any(v < 0):
            raise ValueError("depth map contains negative depths")
        self.values = v

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0


@dataclass
class FusedPointCloud:
    """Colored world-frame points with per-point provenance."""

    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    source_camera: np.ndarray  # (N,) int index into `camera_ids`
    source_pixel: np.ndarray  # (N, 2) int (u, v)
    camera_ids: list[str]

    def __post_init__(self) -> None:
        if len(self.positions) and not np.all(np.isfinite(self.positions)):
            raise ValueError("cloud contains non-finite positions")
        if len(self.colors) and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("cloud colors out of [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty() -> "FusedPointCloud":
        return FusedPointCloud(
            positions=np.zeros((0, 3)),
            colors=np.zeros((0, 3)),
            source_camera=np.zeros(0, dtype=np.int32),
            source_pixel=np.zeros((0, 2), dtype=np.int32),
            camera_ids=[],
        )


def block_match(
    left: np.ndarray,
    right: np.ndarray,
    max_disparity: int = 64,
    window: int = 9,
) -> np.ndarray:
    """Integer-disparity SAD block matching with a left-right check.

    Both images must be rectified grayscale of identical shape (epipolar
    lines horizontal, right camera displaced along +x so features shift
    left in the right image).  Returns a float disparity map with -1 at
    pixels failing the 1 px left-right consistency check or with no valid
    candidate.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError("left/right shapes differ")
    h, w = left.shape
    if max_disparity >= w:
        raise ValueError(f"max_disparity {max_disparity} must be < image width {w}")

    n_disp = max_disparity + 1
    cost_l = np.full((n_disp, h, w), np.inf)
    cost_r = np.full((n_disp, h, w), np.inf)
    for d in range(n_disp):
        diff = np.abs(left[:, d:] - right[:, : w - d if d else w])
        sad = ndimage.uniform_filter(diff, size=window, mode="nearest")
        cost_l[d, :, d:] = sad
        cost_r[d, :, : w - d if d else w] = sad

    disp_l = np.argmin(cost_l, axis=0).astype(np.float64)
    disp_r = np.argmin(cost_r, axis=0).astype(np.float64)

    # Left-right check: disparity must agree with the right image's match.
    cols = np.arange(w)[None, :].repeat(h, axis=0)
    match_col = (cols - disp_l).astype(np.int64)
    in_range = match_col >= 0
    rt = np.where(in_range, disp_r[np.arange(h)[:, None], np.clip(match_col, 0, w - 1)], np.inf)
    consistent = np.abs(rt - disp_l) <= 1.0
    disp_l[~(consistent & in_range)] = -1.0
    return disp_l


def disparity_to_depth(
    disp: np.ndarray,
    fx: float,
    baseline: float,
    camera: str = "cam",
    frame: int = 0,
    z_max: float = Z_MAX_DEFAULT,
) -> DepthMap:
    """Convert disparity (px) to metric depth: z = fx * baseline / disp.

    Non-positive disparities and depths beyond z_max map to invalid (0).
    """
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    disp = np.asarray(disp, dtype=np.float64)
    z = np.zeros_like(disp)
    valid = disp > 0
    z[valid] = fx * baseline / disp[valid]
    z[z > z_max] = 0.0
    return DepthMap(values=z, camera=camera, frame=frame)


def fuse(
    depth_maps: list[DepthMap],
    images: dict[str, np.ndarray],
    rig: CameraRig,
) -> FusedPointCloud:
    """Unproject every valid depth pixel into one colored world cloud.

    `images` maps camera id to an (H, W, 3) float image in [0, 1] giving
    each point its color.  Point count equals the total number of valid
    pixels; provenance (camera, pixel) is kept per point.
    """
    camera_ids = [dm.camera for dm in depth_maps]
    positions, colors, src_cam, src_px = [], [], [], []
    for ci, dm in enumerate(depth_maps):
        if dm.camera not in rig:
            raise ConfigurationError(f"rig has no camera {dm.camera!r}")
        cam = rig[dm.camera]
        mask = dm.valid_mask
        if not mask.any():
            continue
        vs, us = np.nonzero(mask)
        px = np.stack([us.astype(np.float64), vs.astype(np.float64)], axis=1)
        pts = unproject_many(cam, px, dm.values[mask].astype(np.float64))
        positions.append(pts)
        colors.append(np.asarray(images[dm.camera], dtype=np.float64)[vs, us])
        src_cam.append(np.full(len(us), ci, dtype=np.int32))
        src_px.append(np.stack([us, vs], axis=1).astype(np.int32))
    if not positions:
        logger.warning("fuse: no valid depth pixels, returning empty cloud")
        return FusedPointCloud.empty()
    return FusedPointCloud(
        positions=np.concatenate(positions),
        colors=np.clip(np.concatenate(colors), 0.0, 1.0),
        source_camera=np.concatenate(src_cam),
        source_pixel=np.concatenate(src_px),
        camera_ids=camera_ids,
    )


def voxel_downsample(cloud: FusedPointCloud, voxel: float) -> FusedPointCloud:
    """Collapse each occupied voxel to the centroid of its member points.

    Colors are averaged; provenance is taken from the member closest to
    the centroid.  Idempotent at a fixed voxel size.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    n_vox = len(counts)

    centroids = np.zeros((n_vox, 3))
    mean_colors = np.zeros((n_vox, 3))
    for k in range(3):
        centroids[:, k] = np.bincount(inverse, weights=cloud.positions[:, k], minlength=n_vox)
        mean_colors[:, k] = np.bincount(inverse, weights=cloud.colors[:, k], minlength=n_vox)
    centroids /= counts[:, None]
    mean_colors /= counts[:, None]

    # Representative member per voxel: nearest to centroid, ties by index.
    d2 = np.sum((cloud.positions - centroids[inverse]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(cloud)), d2, inverse))
    first = np.zeros(n_vox, dtype=np.int64)
    seen = np.zeros(n_vox, dtype=bool)
    for idx in order:
        v = inverse[idx]
        if not seen[v]:
            seen[v] = True
            first[v] = idx

    return FusedPointCloud(
        positions=centroids,
        colors=np.clip(mean_colors, 0.0, 1.0),
        source_camera=cloud.source_camera[first] if len(cloud.source_camera) else cloud.source_camera,
        source_pixel=cloud.source_pixel[first] if len(cloud.source_pixel) else cloud.source_pixel,
        camera_ids=cloud.camera_ids,
    )


def remove_outliers(
    cloud: FusedPointCloud, k: int = 20, std_ratio: float = 2.0
) -> FusedPointCloud:
    """Statistical outlier removal on mean k-NN distance.

    Drops points whose mean distance to their k nearest neighbors exceeds
    global_mean + std_ratio * global_std.  Clouds with <= k points are
    returned unchanged with a warning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(cloud)
    if n <= k:
        logger.warning("remove_outliers: cloud of %d points <= k=%d, unchanged", n, k)
        return cloud
    tree = cKDTree(cloud.positions)
    dists, _ = tree.query(cloud.positions, k=k + 1)
    mean_knn = dists[:, 1:].mean(axis=1)
    thresh = mean_knn.mean() + std_ratio * mean_knn.std()
    keep = mean_knn <= thresh
    return FusedPointCloud(
        positions=cloud.positions[keep],
        colors=cloud.colors[keep],
        source_camera=cloud.source_camera[keep],
        source_pixel=cloud.source_pixel[keep],
        camera_ids=cloud.camera_ids,
    )


# ---------------------------------------------------------------------------
# EGDP depth-map binary format: 16-byte header (magic "EGDP", u32 width,
# u32 height, f32 reserved) followed by width*height little-endian f32.
# ---------------------------------------------------------------------------


def save_depth(dm: DepthMap, path: str | Path) -> None:
    h, w = dm.values.shape
    header = EGDP_MAGIC + struct.pack("<IIf", w, h, 0.0)
    payload = np.ascontiguousarray(dm.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_depth(path: str | Path, camera: str = "cam", frame: int = 0) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated EGDP header ({len(raw)} bytes)")
    if raw[:4] != EGDP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {EGDP_MAGIC!r}")
    w, h, _ = struct.unpack("<IIf", raw[4:16])
    expected = 16 + 4 * w * h
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw[16:], dtype="<f4").reshape(h, w).astype(np.float64)
    return DepthMap(values=values, camera=camera, frame=frame)


# ---------------------------------------------------------------------------
# PLY export/import (x, y, z, red, green, blue), ASCII or binary LE.
# ---------------------------------------------------------------------------


def save_ply(cloud: FusedPointCloud, path: str | Path, binary: bool = True) -> None:
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    if binary:
        rec = np.zeros(
            n,
            dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                   ("r", "u1"), ("g", "u1"), ("b", "u1")],
        )
        rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
        rec["r"], rec["g"], rec["b"] = rgb.T
        path.write_bytes(header.encode("ascii") + rec.tobytes())
    else:
        lines = [header]
        for p, c in zip(cloud.positions, rgb):
            lines.append(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]} {c[1]} {c[2]}\n")
        path.write_text("".join(lines))


def load_ply(path: str | Path) -> FusedPointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError(f"{path}: not a PLY file (no end_header)")
    header = raw[: end + 11].decode("ascii")
    body = raw[end + 11 :]
    n = 0
    binary = False
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("format binary_little_endian"):
            binary = True
    if binary:
        rec = np.frombuffer(
            body,
            dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                   ("r", "u1"), ("g", "u1"), ("b", "u1")],
            count=n,
        )
        pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        col = np.stack([rec["r"], rec["g"], rec["b"]], axis=1).astype(np.float64) / 255.0
    else:
        rows = body.decode("ascii").split()
        arr = np.array(rows[: n * 6], dtype=np.float64).reshape(n, 6)
        pos = arr[:, :3]
        col = arr[:, 3:] / 255.0
    return FusedPointCloud(
        positions=pos,
        colors=np.clip(col, 0.0, 1.0),
        source_camera=np.zeros(n, dtype=np.int32),
        source_pixel=np.zeros((n, 2), dtype=np.int32),
        camera_ids=[],
    )
