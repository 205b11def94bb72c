"""Synthetic room scenes with known geometry, captures and wand sweeps.

Everything downstream of this module treats its output as ordinary
captured data: posed stereo images, depth maps, wand centroid tracks.
Because the imaging model is the same dense compositor the trainer
fits against, every derived quantity (depth, disparity, calibration
residuals) has a closed-form or directly renderable ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import WandObservation, WandSpec
from .geometry import Camera, CameraRig, Intrinsics, Pose, look_at, save_rig
from .images import save_png, to_uint8
from .splats import (
    GaussianScene,
    RenderSettings,
    drop_grazing,
    reference_render,
    save_scene,
)
from .stereo import DepthMap, save_depth
from .calibration import save_wand_observations

MANIFEST_VERSION = 1

_WALL_PALETTES = np.array(
    [
        [0.62, 0.54, 0.46],  # floor
        [0.78, 0.78, 0.74],  # ceiling
        [0.42, 0.52, 0.63],  # wall -y
        [0.60, 0.44, 0.38],  # wall +y
        [0.46, 0.60, 0.46],  # wall -x
        [0.58, 0.56, 0.40],  # wall +x
    ]
)

_BLOB_COLORS = np.array(
    [
        [0.82, 0.26, 0.22],
        [0.22, 0.42, 0.78],
        [0.88, 0.74, 0.20],
    ]
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic dataset.

    `room` is (x extent, y extent, height) in meters with the floor at
    z = 0 and the origin at the room center.  One stereo pair is placed
    at each of the four walls; `baseline` is the left-to-right camera
    offset along the camera's own x axis.
    """

    room: tuple[float, float, float] = (4.0, 4.0, 2.6)
    image_width: int = 160
    image_height: int = 120
    focal_px: float = 150.0
    baseline: float = 0.12
    wall_spacing: float = 0.13
    n_blobs: int = 3
    n_timestamps: int = 1
    wand_frames: int = 80
    wand_lengths: tuple[float, float] = (0.2, 0.4)
    pixel_noise: float = 0.3
    depth_noise: float = 0.0
    camera_height: float = 1.9
    camera_margin: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        w, l, h = self.room
        if min(w, l, h) <= 0.5:
            raise ValueError(f"room dimensions too small: {self.room}")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if self.wall_spacing <= 0.02:
            raise ValueError("wall spacing below 2 cm would be enormous")
        if self.n_timestamps < 1:
            raise ValueError("need at least one timestamp")
        if not 0 < self.camera_margin < min(w, l) / 2:
            raise ValueError("camera margin must leave the camera inside the room")
        if self.camera_height >= h or self.camera_height <= 0:
            raise ValueError("camera height must be inside the room")

    @property
    def wand(self) -> WandSpec:
        a, b = self.wand_lengths
        return WandSpec(a, b, a + b)


@dataclass
class SyntheticDataset:
    """In-memory result of :func:`generate` before anything hits disk."""

    spec: SyntheticSpec
    scenes: list[GaussianScene]
    rig: CameraRig
    captures: dict[str, list[np.ndarray]]  # camera id -> one image per timestamp
    depths: dict[str, list[DepthMap]]  # left camera ids only
    wand_observations: list[WandObservation]
    wand_points: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def left_ids(self) -> list[str]:
        return [c.id for c in self.rig if c.id.endswith("L")]


def _sheet(
    origin: np.ndarray,
    u_dir: np.ndarray,
    v_dir: np.ndarray,
    extent_u: float,
    extent_v: float,
    spacing: float,
    palette: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One jittered grid of flat Gaussians spanning a rectangle.

    Returns (positions, log_scales, rotations, colors).  The sheet's
    normal is u_dir x v_dir; Gaussians are squashed along it.
    """
    u_dir = np.asarray(u_dir, dtype=np.float64)
    v_dir = np.asarray(v_dir, dtype=np.float64)
    normal = np.cross(u_dir, v_dir)

    nu = max(int(round(extent_u / spacing)), 2)
    nv = max(int(round(extent_v / spacing)), 2)
    uu = (np.arange(nu) + 0.5) * (extent_u / nu) - extent_u / 2
    vv = (np.arange(nv) + 0.5) * (extent_v / nv) - extent_v / 2
    gu, gv = np.meshgrid(uu, vv, indexing="ij")
    gu = gu.ravel() + rng.uniform(-0.3, 0.3, gu.size) * (extent_u / nu)
    gv = gv.ravel() + rng.uniform(-0.3, 0.3, gv.size) * (extent_v / nv)
    n = gu.size

    pos = (
        origin[None, :]
        + gu[:, None] * u_dir[None, :]
        + gv[:, None] * v_dir[None, :]
        + rng.uniform(-0.004, 0.004, (n, 1)) * normal[None, :]
    )

    # Smooth two-frequency color bands plus per-Gaussian jitter: enough
    # contrast for block matching, smooth enough to fit at low count.
    phase = 2 * np.pi * (gu * 0.9 + gv * 0.55)
    phase2 = 2 * np.pi * (gu * 2.6 - gv * 1.7)
    band = 0.14 * np.sin(phase) + 0.08 * np.sin(phase2)
    colors = palette[None, :] * (1.0 + band[:, None])
    colors = colors + rng.uniform(-0.04, 0.04, (n, 3))
    colors = np.clip(colors, 0.03, 0.97)

    tangential = np.log(0.62 * spacing)
    log_scales = np.tile([tangential, tangential, np.log(0.008)], (n, 1))

    # Rotation carrying local (u, v, normal) axes onto world axes.
    basis = np.stack([u_dir, v_dir, normal], axis=1)
    rot = _rotmat_to_quat_single(basis)
    rotations = np.tile(rot, (n, 1))
    return pos, log_scales, rotations, colors


def _rotmat_to_quat_single(m: np.ndarray) -> np.ndarray:
    from .geometry import rotmat_to_quat

    return rotmat_to_quat(m)


def _blob(
    center: np.ndarray,
    radii: np.ndarray,
    color: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """A soft ellipsoidal shell of Gaussians standing in for an actor."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    shell = rng.uniform(0.85, 1.0, (n, 1))
    pos = center[None, :] + d * shell * radii[None, :]
    colors = np.clip(color[None, :] + rng.uniform(-0.08, 0.08, (n, 3)), 0.03, 0.97)
    log_scales = np.full((n, 3), np.log(0.032))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return pos, log_scales, rotations, colors


def _blob_centers(spec: SyntheticSpec, t: int) -> np.ndarray:
    """Actor positions at timestamp t; a slow deterministic drift."""
    base = np.array(
        [
            [-0.28, -0.10, 1.02],
            [0.26, 0.16, 1.00],
            [0.02, -0.30, 1.05],
        ]
    )[: spec.n_blobs]
    drift = np.array([[0.05, 0.02, 0.0], [-0.03, 0.04, 0.01], [0.04, -0.05, 0.0]])
    return base + t * drift[: spec.n_blobs]


def build_scene(spec: SyntheticSpec, timestamp: int = 0) -> GaussianScene:
    """Ground-truth Gaussian scene: textured room shell, table, actors.

    Static geometry is seeded independently of the timestamp so only
    the actors move between frames.
    """
    rng = np.random.default_rng(spec.seed)
    w, l, h = spec.room
    hw, hl = w / 2, l / 2
    s = spec.wall_spacing

    parts = []
    ex, ey, ez = np.eye(3)
    # Floor plus the four vertical walls.  There is no ceiling sheet:
    # the cameras sit just below ceiling height looking down, so one
    # would never be imaged, but its plane would pass within a few
    # centimeters of every camera center and splats projected at such
    # grazing depths degenerate into image-wide smears.
    parts.append(_sheet(np.array([0, 0, 0.0]), ex, ey, w, l, s, _WALL_PALETTES[0], rng))
    parts.append(
        _sheet(np.array([0, -hl, h / 2]), ex, ez, w, h, s, _WALL_PALETTES[2], rng)
    )
    parts.append(
        _sheet(np.array([0, hl, h / 2]), ez, ex, h, w, s, _WALL_PALETTES[3], rng)
    )
    parts.append(
        _sheet(np.array([-hw, 0, h / 2]), ez, ey, h, l, s, _WALL_PALETTES[4], rng)
    )
    parts.append(
        _sheet(np.array([hw, 0, h / 2]), ey, ez, l, h, s, _WALL_PALETTES[5], rng)
    )
    # table top at 0.85 m under the actors
    parts.append(
        _sheet(
            np.array([0, 0, 0.85]),
            ex,
            ey,
            1.3,
            0.9,
            s * 0.45,
            np.array([0.34, 0.30, 0.28]),
            rng,
        )
    )

    opac_wall = np.log(0.97 / 0.03)  # logit of 0.97
    positions = [p[0] for p in parts]
    log_scales = [p[1] for p in parts]
    rotations = [p[2] for p in parts]
    colors = [p[3] for p in parts]
    opacities = [np.full(len(p[0]), opac_wall) for p in parts]

    centers = _blob_centers(spec, timestamp)
    radii = np.array([[0.10, 0.08, 0.13], [0.08, 0.10, 0.11], [0.12, 0.07, 0.09]])
    blob_rng = np.random.default_rng(spec.seed + 1)
    for i in range(spec.n_blobs):
        bp, bs, br, bc = _blob(
            centers[i], radii[i % 3], _BLOB_COLORS[i % 3], 130, blob_rng
        )
        positions.append(bp)
        log_scales.append(bs)
        rotations.append(br)
        colors.append(bc)
        opacities.append(np.full(len(bp), np.log(0.92 / 0.08)))

    scene = GaussianScene(
        positions=np.concatenate(positions),
        log_scales=np.concatenate(log_scales),
        rotations=np.concatenate(rotations),
        opacity_logits=np.concatenate(opacities),
        colors=np.concatenate(colors),
        timestamp=timestamp,
    )
    return drop_grazing(scene, build_rig(spec))


def build_rig(spec: SyntheticSpec) -> CameraRig:
    """Four wall-mounted stereo pairs aimed at the room center.

    Pair i's left camera id is "cam{i}L" and the right camera sits
    `baseline` meters along the left camera's +x (image right) axis
    with the same orientation, so the pair is rectified by construction.
    """
    w, l, h = spec.room
    intr = Intrinsics(
        fx=spec.focal_px,
        fy=spec.focal_px,
        cx=spec.image_width / 2,
        cy=spec.image_height / 2,
        width=spec.image_width,
        height=spec.image_height,
    )
    target = np.array([0.0, 0.0, 0.9])
    eyes = [
        np.array([w / 2 - spec.camera_margin, 0.0, spec.camera_height]),
        np.array([0.0, l / 2 - spec.camera_margin, spec.camera_height]),
        np.array([-(w / 2 - spec.camera_margin), 0.0, spec.camera_height]),
        np.array([0.0, -(l / 2 - spec.camera_margin), spec.camera_height]),
    ]
    cams = []
    for i, eye in enumerate(eyes):
        pose_l = look_at(eye, target)
        t_right = pose_l.t + pose_l.R @ np.array([spec.baseline, 0.0, 0.0])
        pose_r = Pose(pose_l.q, t_right)
        cams.append(Camera(intr, pose_l, id=f"cam{i}L"))
        cams.append(Camera(intr, pose_r, id=f"cam{i}R"))
    rig = CameraRig(cams)
    _check_rig_inside(rig, spec)
    return rig


def _check_rig_inside(rig: CameraRig, spec: SyntheticSpec) -> None:
    w, l, h = spec.room
    lo = np.array([-w / 2, -l / 2, 0.0])
    hi = np.array([w / 2, l / 2, h])
    for cam in rig:
        t = cam.pose.t
        if np.any(t <= lo + 0.05) or np.any(t >= hi - 0.05):
            raise ValueError(
                f"camera {cam.id} at {t} is outside the room (or within 5 cm "
                f"of a wall); shrink the baseline or margins"
            )


def render_capture(scene: GaussianScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Render one ground-truth capture; returns (uint8 image, depth).

    Depth is the median-crossing depth of the dense render: the depth
    of the surface that absorbed half the ray, the way a stereo matcher
    locks onto one surface.  The alpha-weighted expected depth would
    blend foreground and background depths across every silhouette,
    which unprojects into a halo of floating points between objects.
    Pixels whose accumulated alpha never reached one half are zeroed
    (invalid), matching how matchers leave holes where support is thin.
    """
    out = reference_render(scene, camera, RenderSettings())
    img = to_uint8(out.color)
    depth = out.median_depth.copy()
    return img, depth


def make_wand_observations(
    spec: SyntheticSpec, rig: CameraRig, rng: np.random.Generator
) -> tuple[list[WandObservation], dict[int, np.ndarray]]:
    """Simulated wand sweep seen by the four left cameras.

    Each frame places a rigid three-sphere wand at a random position
    and orientation in the central volume of the room.  A camera
    contributes an observation only when all three spheres project
    within its image with margin; centroid order is shuffled per
    observation and pixel noise is added afterwards.
    """
    wand = spec.wand
    half = wand.d_ac / 2
    lefts = [rig[cid] for cid in sorted(c.id for c in rig) if cid.endswith("L")]
    target = np.array([0.0, 0.0, 0.9])

    observations: list[WandObservation] = []
    truth: dict[int, np.ndarray] = {}
    for frame in range(spec.wand_frames):
        c = target + rng.uniform(-0.45, 0.45, 3)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        pts = np.stack(
            [c - half * u, c + (wand.d_ab - half) * u, c + half * u]
        )
        truth[frame] = pts
        for cam in lefts:
            cam_pts = cam.world_to_camera(pts)
            if np.any(cam_pts[:, 2] < 0.1):
                continue
            px = cam_pts[:, :2] / cam_pts[:, 2:3]
            px = px * [cam.intrinsics.fx, cam.intrinsics.fy] + [
                cam.intrinsics.cx,
                cam.intrinsics.cy,
            ]
            if np.any(px < 2) or np.any(
                px >= [cam.intrinsics.width - 2, cam.intrinsics.height - 2]
            ):
                continue
            order = rng.permutation(3)
            noisy = px[order] + rng.normal(0, spec.pixel_noise, (3, 2))
            observations.append(
                WandObservation(frame=frame, camera=cam.id, centroids=noisy)
            )
    return observations, truth


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """Build the full dataset in memory: scenes, rig, captures, depth, wand."""
    rig = build_rig(spec)
    scenes = [build_scene(spec, t) for t in range(spec.n_timestamps)]

    captures: dict[str, list[np.ndarray]] = {c.id: [] for c in rig}
    depths: dict[str, list[DepthMap]] = {
        c.id: [] for c in rig if c.id.endswith("L")
    }
    depth_rng = np.random.default_rng(spec.seed + 2)
    for t, scene in enumerate(scenes):
        for cam in rig:
            img, depth = render_capture(scene, cam)
            captures[cam.id].append(img)
            if cam.id in depths:
                if spec.depth_noise > 0:
                    noise = 1.0 + depth_rng.normal(0, spec.depth_noise, depth.shape)
                    depth = np.where(depth > 0, np.maximum(depth * noise, 1e-4), 0.0)
                depths[cam.id].append(DepthMap(depth.astype(np.float32), cam.id, t))

    wand_rng = np.random.default_rng(spec.seed + 3)
    wand_obs, wand_points = make_wand_observations(spec, rig, wand_rng)
    return SyntheticDataset(
        spec=spec,
        scenes=scenes,
        rig=rig,
        captures=captures,
        depths=depths,
        wand_observations=wand_obs,
        wand_points=wand_points,
    )


def write_dataset(ds: SyntheticDataset, outdir: str | Path) -> dict:
    """Write a dataset directory and return the manifest dict.

    Layout: manifest.json, rig_gt.json, wand.jsonl, scene_gt_t*.egsp,
    images/<cam>_t*.png, depth/<cam>_t*.egdp.  Output is byte-identical
    for a fixed spec.
    """
    out = Path(outdir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)

    save_rig(ds.rig, out / "rig_gt.json")
    save_wand_observations(ds.wand_observations, out / "wand.jsonl")
    scene_names = {}
    for t, scene in enumerate(ds.scenes):
        name = "scene_gt.egsp" if t == 0 else f"scene_gt_t{t:04d}.egsp"
        save_scene(scene, out / name)
        scene_names[str(t)] = name

    timestamps = list(range(ds.spec.n_timestamps))
    cam_entries = []
    for cam in ds.rig:
        pair = cam.id[:-1]
        role = "left" if cam.id.endswith("L") else "right"
        images = {}
        for t in timestamps:
            rel = f"images/{cam.id}_t{t:04d}.png"
            save_png(ds.captures[cam.id][t] / 255.0, out / rel)
            images[str(t)] = rel
        entry = {"id": cam.id, "pair": pair, "role": role, "images": images}
        if cam.id in ds.depths:
            dmaps = {}
            for t in timestamps:
                rel = f"depth/{cam.id}_t{t:04d}.egdp"
                save_depth(ds.depths[cam.id][t], out / rel)
                dmaps[str(t)] = rel
            entry["depths"] = dmaps
        cam_entries.append(entry)

    manifest = {
        "version": MANIFEST_VERSION,
        "rig": "rig_gt.json",
        "wand": "wand.jsonl",
        "baseline": ds.spec.baseline,
        "timestamps": timestamps,
        "scene_gt": scene_names,
        "cameras": cam_entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def generate_dataset(spec: SyntheticSpec, outdir: str | Path) -> dict:
    return write_dataset(generate(spec), outdir)


def perturb(
    scene: GaussianScene,
    sigma_position: float = 0.0,
    sigma_color: float = 0.0,
    seed: int = 0,
) -> GaussianScene:
    """Seeded Gaussian noise on positions and colors; sigma 0 is identity."""
    rng = np.random.default_rng(seed)
    pos = scene.positions.copy()
    col = scene.colors.copy()
    if sigma_position > 0:
        pos = pos + rng.normal(0, sigma_position, pos.shape)
    if sigma_color > 0:
        col = np.clip(col + rng.normal(0, sigma_color, col.shape), 0.0, 1.0)
    return GaussianScene(
        positions=pos,
        log_scales=scene.log_scales.copy(),
        rotations=scene.rotations.copy(),
        opacity_logits=scene.opacity_logits.copy(),
        colors=col,
        timestamp=scene.timestamp,
    )
