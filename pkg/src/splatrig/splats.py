"""Gaussian scene representation, projection, and rendering.

A scene is a structure-of-arrays collection of anisotropic 3D Gaussians
(position, log-scale, rotation quaternion, opacity logit, RGB color).
Rendering projects each Gaussian to a 2D footprint (mean, covariance)
and alpha-composites front to back.  Two renderers share the same
projection and compositing math:

* :func:`reference_render` evaluates every Gaussian densely at every
  pixel with no spatial acceleration.  Slow, simple, trustworthy.
* :func:`rasterize` runs tiled compiled kernels with per-tile culling
  and early ray termination, and can record what the backward pass
  needs for gradient computation.

The raw parameter vectors are unconstrained; activations are applied at
render time (exp for scales, sigmoid for opacity, quaternion
normalization for rotations).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera
from .stereo import FusedPointCloud

logger = logging.getLogger(__name__)

EGSP_MAGIC = b"EGSP"
EGSP_VERSION = 1
FLOATS_PER_GAUSSIAN = 14

ALPHA_CLAMP = 0.99
SCALE_MIN = 1e-6
SCALE_MAX = 10.0
COV2D_DILATION = 0.3
CONDITION_LIMIT = 1e12


class SceneFormatError(ValueError):
    """Raised when an EGSP blob fails structural validation."""


@dataclass
class GaussianScene:
    """Unconstrained Gaussian parameters for one reconstructed instant.

    Attributes:
        positions: (N, 3) world-frame centers in meters.
        log_scales: (N, 3) per-axis log standard deviations.
        rotations: (N, 4) quaternions (w, x, y, z), not necessarily unit.
        opacity_logits: (N,) pre-sigmoid opacities.
        colors: (N, 3) RGB in [0, 1].
        timestamp: frame index this scene reconstructs.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    timestamp: int = 0

    def __post_init__(self) -> None:
        n = len(self.positions)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"scene {name} contain non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("scene contains zero-norm rotation quaternions")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def count(self) -> int:
        return len(self.positions)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            timestamp=self.timestamp,
        )

    def unit_rotations(self) -> np.ndarray:
        """Quaternions normalized to unit length, sign preserved."""
        return self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def scales(self) -> np.ndarray:
        """Activated per-axis standard deviations, clipped to sane range."""
        return np.clip(np.exp(self.log_scales), SCALE_MIN, SCALE_MAX)

    def opacities(self) -> np.ndarray:
        """Activated opacities, sigmoid of the stored logits."""
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))


@dataclass
class RenderSettings:
    """Knobs shared by both renderers (background, cutoffs, tiling)."""

    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tile: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    near_plane: float = 0.05

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(self.background < 0) or np.any(self.background > 1):
            raise ValueError("background color must lie in [0, 1]")
        if self.tile < 1:
            raise ValueError("tile size must be >= 1")


@dataclass
class RenderOutput:
    """Images produced by a render call.

    `alpha` is 1 minus the residual transmittance, so alpha + residual
    transmittance is 1 exactly.  `depth` is the alpha-weighted expected
    depth, normalized by accumulated alpha, zero where nothing rendered.
    `median_depth` is the depth of the Gaussian whose compositing pushed
    residual transmittance below one half; unlike the expected depth it
    always lies on an actual surface instead of blending two of them
    across a silhouette, which makes it the right source for emulated
    stereo depth maps.  Zero where transmittance never reached one half.
    `contributing` counts Gaussians whose alpha survived the cutoff at
    each pixel.
    """

    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W)
    median_depth: np.ndarray  # (H, W)
    contributing: np.ndarray  # (H, W) int32
    ctx: "RenderContext | None" = None


@dataclass
class RenderContext:
    """Forward-pass leftovers the backward pass consumes."""

    mean2d: np.ndarray
    conic: np.ndarray
    cam_t: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    valid: np.ndarray
    tile_gauss: np.ndarray
    tile_offsets: np.ndarray
    final_t: np.ndarray
    n_processed: np.ndarray
    camera: Camera
    settings: RenderSettings


def rotmats_from_quats(quats: np.ndarray) -> np.ndarray:
    """Batch unit-quaternion (w, x, y, z) to rotation matrices, (N, 3, 3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    m = np.empty((len(quats), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance3d(scene: GaussianScene) -> np.ndarray:
    """World-frame 3x3 covariances R diag(s^2) R^T for every Gaussian."""
    rot = rotmats_from_quats(scene.unit_rotations())
    rs = rot * scene.scales()[:, None, :]
    return rs @ rs.transpose(0, 2, 1)


def project_gaussians(
    scene: GaussianScene, camera: Camera, near_plane: float = 0.05
) -> dict[str, np.ndarray]:
    """Project all Gaussians into one camera.

    Linearizes the perspective division at each center (first-order
    propagation of the 3D covariance) and adds a fixed screen-space
    dilation so footprints never collapse below a pixel.

    The linearization only makes sense near the view cone.  A center far
    outside it (huge ``|x/z|`` or ``|y/z|``) has a first-order footprint
    that smears across the whole image, so for the covariance the
    Jacobian is evaluated at the nearest point within 1.3 times the field
    of view.  The projected mean always keeps the true perspective value.

    Returns a dict of per-Gaussian arrays: `mean2d` (N, 2), `cov2d`
    (N, 2, 2), `conic` (N, 3) as (a, b, c) of the inverse covariance
    [[a, b], [b, c]], `cam_t` (N, 3) camera-frame centers, `jacobian`
    (N, 2, 3) evaluated at the possibly clamped point, `jac_xy` (N, 2)
    with that point's lateral coordinates, `jac_inside` (N, 2) marking
    where no clamping happened, and a `valid` mask (in front of the near
    plane, finite, invertible footprint).
    """
    n = len(scene)
    w_mat = camera.pose.R.T
    t = (scene.positions - camera.pose.t) @ camera.pose.R  # camera frame
    valid = t[:, 2] > near_plane

    fx, fy = camera.intrinsics.fx, camera.intrinsics.fy
    cx, cy = camera.intrinsics.cx, camera.intrinsics.cy
    tz = np.where(valid, t[:, 2], 1.0)

    mean2d = np.empty((n, 2))
    mean2d[:, 0] = fx * t[:, 0] / tz + cx
    mean2d[:, 1] = fy * t[:, 1] / tz + cy

    lim_x = 1.3 * (camera.intrinsics.width / 2.0) / fx
    lim_y = 1.3 * (camera.intrinsics.height / 2.0) / fy
    rx = t[:, 0] / tz
    ry = t[:, 1] / tz
    jac_inside = np.empty((n, 2))
    jac_inside[:, 0] = np.abs(rx) <= lim_x
    jac_inside[:, 1] = np.abs(ry) <= lim_y
    jx = np.where(jac_inside[:, 0] > 0, t[:, 0], np.sign(rx) * lim_x * tz)
    jy = np.where(jac_inside[:, 1] > 0, t[:, 1], np.sign(ry) * lim_y * tz)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * jx / tz**2
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * jy / tz**2

    cov3 = covariance3d(scene)
    m = jac @ w_mat[None, :, :]
    cov2d = m @ cov3 @ m.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    tr = a + c
    disc = np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
    lam_max = tr / 2 + disc
    lam_min = tr / 2 - disc
    invertible = (det > 0) & (lam_min > 0) & (lam_max / np.maximum(lam_min, 1e-300) < CONDITION_LIMIT)
    valid &= invertible & np.all(np.isfinite(mean2d), axis=1)

    safe_det = np.where(valid, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    return {
        "mean2d": mean2d,
        "cov2d": cov2d,
        "conic": conic,
        "cam_t": t,
        "jacobian": jac,
        "jac_xy": np.stack([jx, jy], axis=1),
        "jac_inside": jac_inside,
        "valid": valid,
        "lam_max": lam_max,
        "world_to_cam_rot": w_mat,
    }


def project_gaussian(
    scene: GaussianScene, index: int, camera: Camera
) -> tuple[np.ndarray, np.ndarray, float]:
    """Single-Gaussian projection: (mean2d, cov2d, camera-frame depth).

    Raises ValueError when the center sits behind the near plane or the
    projected footprint is degenerate.
    """
    proj = project_gaussians(scene, camera)
    if not proj["valid"][index]:
        raise ValueError(f"gaussian {index} does not project validly into camera {camera.id!r}")
    return proj["mean2d"][index], proj["cov2d"][index], float(proj["cam_t"][index, 2])


def _depth_order(depths: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Front-to-back ordering of valid Gaussians; depth ties broken by index."""
    idx = np.nonzero(valid)[0]
    order = np.lexsort((idx, depths[idx]))
    return idx[order]


def reference_render(
    scene: GaussianScene, camera: Camera, settings: RenderSettings | None = None
) -> RenderOutput:
    """Dense per-pixel compositing with no tiling, culling or termination.

    Every valid Gaussian is evaluated at every pixel in strict depth
    order.  Used as the correctness oracle for :func:`rasterize` and as
    the ground-truth imaging model for synthetic scenes.
    """
    settings = settings or RenderSettings()
    h, w = camera.intrinsics.height, camera.intrinsics.width
    proj = project_gaussians(scene, camera, settings.near_plane)
    order = _depth_order(proj["cam_t"][:, 2], proj["valid"])

    opac = scene.opacities()
    cols = scene.colors

    us = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0).ravel()
    vs = np.arange(h, dtype=np.float64)[:, None].repeat(w, axis=1).ravel()

    trans = np.ones(h * w)
    color = np.zeros((h * w, 3))
    depth_acc = np.zeros(h * w)
    median = np.zeros(h * w)
    alpha_acc = np.zeros(h * w)
    count = np.zeros(h * w, dtype=np.int32)

    for gi in order:
        dx = us - proj["mean2d"][gi, 0]
        dy = vs - proj["mean2d"][gi, 1]
        ca, cb, cc = proj["conic"][gi]
        rho = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        alpha = np.minimum(ALPHA_CLAMP, opac[gi] * np.exp(-0.5 * rho))
        alpha[alpha < settings.alpha_cutoff] = 0.0
        hit = alpha > 0
        if not hit.any():
            continue
        weight = alpha * trans
        color += weight[:, None] * cols[gi]
        depth_acc += weight * proj["cam_t"][gi, 2]
        alpha_acc += weight
        count += hit.astype(np.int32)
        crossing = (trans >= 0.5) & (trans * (1.0 - alpha) < 0.5)
        median[crossing] = proj["cam_t"][gi, 2]
        trans *= 1.0 - alpha

    color += trans[:, None] * settings.background
    depth = np.where(alpha_acc > 1e-12, depth_acc / np.maximum(alpha_acc, 1e-12), 0.0)
    return RenderOutput(
        color=color.reshape(h, w, 3),
        alpha=(1.0 - trans).reshape(h, w),
        depth=depth.reshape(h, w),
        median_depth=median.reshape(h, w),
        contributing=count.reshape(h, w),
    )


def rasterize(
    scene: GaussianScene,
    camera: Camera,
    settings: RenderSettings | None = None,
    record: bool = False,
) -> RenderOutput:
    """Tiled rasterization with compiled per-pixel compositing.

    Matches :func:`reference_render` on the color image to within the
    early-termination floor: tiles cull Gaussians only where their alpha
    would already fall below the cutoff, and rays stop once residual
    transmittance drops under `transmittance_floor`.  Pass `record=True`
    to keep the context needed by :func:`rasterize_backward`.
    """
    from . import raster

    settings = settings or RenderSettings()
    h, w = camera.intrinsics.height, camera.intrinsics.width
    proj = project_gaussians(scene, camera, settings.near_plane)
    opac = scene.opacities()

    # Cull Gaussians that can never reach the alpha cutoff anywhere.
    visible = proj["valid"] & (opac > settings.alpha_cutoff)
    order = _depth_order(proj["cam_t"][:, 2], visible)

    # Bounding radius where alpha falls to the cutoff: beyond it the
    # cutoff zeroes the contribution anyway, so tile culling is lossless.
    rho_max = 2.0 * np.log(np.maximum(opac / settings.alpha_cutoff, 1.0))
    radius = np.sqrt(rho_max * np.maximum(proj["lam_max"], 0.0)) + 1.0

    tiles_x = (w + settings.tile - 1) // settings.tile
    tiles_y = (h + settings.tile - 1) // settings.tile
    tile_gauss, tile_offsets = raster.build_tile_lists(
        order.astype(np.int64),
        proj["mean2d"],
        radius,
        proj["conic"],
        rho_max,
        tiles_x,
        tiles_y,
        settings.tile,
        w,
        h,
    )

    out_color = np.zeros((h, w, 3))
    out_trans = np.ones((h, w))
    out_depth_acc = np.zeros((h, w))
    out_median = np.zeros((h, w))
    out_alpha_acc = np.zeros((h, w))
    out_count = np.zeros((h, w), dtype=np.int32)
    out_nproc = np.zeros((h, w), dtype=np.int32)

    raster.forward(
        tile_gauss,
        tile_offsets,
        tiles_x,
        proj["mean2d"],
        proj["conic"],
        opac,
        scene.colors,
        proj["cam_t"][:, 2].copy(),
        settings.tile,
        settings.background,
        settings.alpha_cutoff,
        settings.transmittance_floor,
        out_color,
        out_trans,
        out_depth_acc,
        out_median,
        out_alpha_acc,
        out_count,
        out_nproc,
    )

    depth = np.where(out_alpha_acc > 1e-12, out_depth_acc / np.maximum(out_alpha_acc, 1e-12), 0.0)
    ctx = None
    if record:
        ctx = RenderContext(
            mean2d=proj["mean2d"],
            conic=proj["conic"],
            cam_t=proj["cam_t"],
            opacity=opac,
            color=scene.colors,
            valid=proj["valid"],
            tile_gauss=tile_gauss,
            tile_offsets=tile_offsets,
            final_t=out_trans,
            n_processed=out_nproc,
            camera=camera,
            settings=settings,
        )
    return RenderOutput(
        color=out_color,
        alpha=1.0 - out_trans,
        depth=depth,
        median_depth=out_median,
        contributing=out_count,
        ctx=ctx,
    )


def rasterize_backward(
    scene: GaussianScene, ctx: RenderContext, grad_color: np.ndarray
) -> dict[str, np.ndarray]:
    """Propagate an image-space color gradient back to scene parameters.

    Walks each pixel's composited list in reverse, reconstructing
    transmittances by division (alphas are clamped at 0.99 so the
    divisor stays bounded away from zero), then chains screen-space
    gradients through the projection to positions, log scales, raw
    quaternions, opacity logits, and colors.

    Returns a dict with keys `positions`, `log_scales`, `rotations`,
    `opacity_logits`, `colors`, matching parameter shapes.
    """
    from . import raster

    n = len(scene)
    settings = ctx.settings
    camera = ctx.camera
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)

    per_thread = raster.backward(
        ctx.tile_gauss,
        ctx.tile_offsets,
        (camera.intrinsics.width + settings.tile - 1) // settings.tile,
        ctx.mean2d,
        ctx.conic,
        ctx.opacity,
        ctx.color,
        settings.tile,
        settings.background,
        settings.alpha_cutoff,
        grad_color,
        ctx.final_t,
        ctx.n_processed,
        n,
        camera.intrinsics.width,
        camera.intrinsics.height,
    )
    raw = per_thread.sum(axis=0)
    d_mean2d = raw[:, 0:2]
    d_conic = raw[:, 2:5]  # (a, b, c) with b carrying both off-diagonals
    d_sig_opac = raw[:, 5]
    d_color = raw[:, 6:9]

    # Screen-space covariance gradient from the conic (inverse) gradient:
    # dL/dCov = -Conic @ dL/dConic @ Conic, all symmetric.
    proj = project_gaussians(scene, camera, settings.near_plane)
    conic_mat = np.zeros((n, 2, 2))
    conic_mat[:, 0, 0] = ctx.conic[:, 0]
    conic_mat[:, 0, 1] = conic_mat[:, 1, 0] = ctx.conic[:, 1]
    conic_mat[:, 1, 1] = ctx.conic[:, 2]
    d_conic_mat = np.zeros((n, 2, 2))
    d_conic_mat[:, 0, 0] = d_conic[:, 0]
    d_conic_mat[:, 0, 1] = d_conic_mat[:, 1, 0] = d_conic[:, 1] / 2.0
    d_conic_mat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -conic_mat @ d_conic_mat @ conic_mat

    w_mat = proj["world_to_cam_rot"]
    jac = proj["jacobian"]
    t = proj["cam_t"]
    cov3 = covariance3d(scene)
    m = jac @ w_mat[None, :, :]

    d_m = 2.0 * d_cov2d @ m @ cov3
    d_cov3 = m.transpose(0, 2, 1) @ d_cov2d @ m
    d_jac = d_m @ w_mat.T[None, :, :]

    fx, fy = camera.intrinsics.fx, camera.intrinsics.fy
    tz = np.where(proj["valid"], t[:, 2], 1.0)
    jx = proj["jac_xy"][:, 0]
    jy = proj["jac_xy"][:, 1]
    in_x = proj["jac_inside"][:, 0]
    in_y = proj["jac_inside"][:, 1]

    # Center path: the projected mean keeps the true perspective mapping,
    # so its derivative uses the unclamped lateral coordinates.
    d_t = np.empty((n, 3))
    d_t[:, 0] = jac[:, 0, 0] * d_mean2d[:, 0]
    d_t[:, 1] = jac[:, 1, 1] * d_mean2d[:, 1]
    d_t[:, 2] = (-fx * t[:, 0] / tz**2) * d_mean2d[:, 0] + (
        -fy * t[:, 1] / tz**2
    ) * d_mean2d[:, 1]

    # Footprint path: where the Jacobian evaluation point was clamped the
    # entry -f*jx/tz^2 no longer depends on the lateral coordinate and is
    # linear in 1/tz instead of quadratic, so the lateral contribution is
    # gated off and the depth term loses its factor of two.
    d_t[:, 0] += in_x * d_jac[:, 0, 2] * (-fx / tz**2)
    d_t[:, 1] += in_y * d_jac[:, 1, 2] * (-fy / tz**2)
    d_t[:, 2] += (
        d_jac[:, 0, 0] * (-fx / tz**2)
        + d_jac[:, 0, 2] * ((1.0 + in_x) * fx * jx / tz**3)
        + d_jac[:, 1, 1] * (-fy / tz**2)
        + d_jac[:, 1, 2] * ((1.0 + in_y) * fy * jy / tz**3)
    )
    d_pos = d_t @ w_mat  # t = W (x - c) so dx = W^T dt

    # 3D covariance to rotation and scale: Cov3 = Q Q^T with Q = R diag(s).
    quats = scene.unit_rotations()
    rot = rotmats_from_quats(quats)
    scales = scene.scales()
    q_mat = rot * scales[:, None, :]
    d_q = 2.0 * d_cov3 @ q_mat
    d_log_scale = scales * np.einsum("nji,njk->nik", rot, d_q)[:, (0, 1, 2), (0, 1, 2)]
    # d/dlog_s = s * d/ds and dQ/ds_k picks column k of R.
    d_rot = d_q * scales[:, None, :]

    d_quat_unit = _rotation_gradient_to_quaternion(quats, d_rot)
    norms = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    d_quat = (d_quat_unit - quats * np.sum(d_quat_unit * quats, axis=1, keepdims=True)) / norms

    sig = ctx.opacity
    d_opacity_logit = d_sig_opac * sig * (1.0 - sig)

    invalid = ~proj["valid"]
    for arr in (d_pos, d_log_scale, d_quat):
        arr[invalid] = 0.0
    d_opacity_logit[invalid] = 0.0
    d_color[invalid] = 0.0

    return {
        "positions": d_pos,
        "log_scales": d_log_scale,
        "rotations": d_quat,
        "opacity_logits": d_opacity_logit,
        "colors": d_color,
    }


def _rotation_gradient_to_quaternion(quats: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR into dL/dq for unit quaternions (w, x, y, z)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    g = d_rot
    dw = 2.0 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def init_from_cloud(
    cloud: FusedPointCloud,
    initial_opacity: float = 0.1,
    fallback_scale: float = 0.02,
    timestamp: int = 0,
) -> GaussianScene:
    """Seed one isotropic Gaussian per cloud point.

    Scale is the mean distance to the 3 nearest neighbors (per point),
    or `fallback_scale` when the cloud is too small for neighbors.
    Colors carry over; opacities start at `initial_opacity`.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot initialize a scene from an empty cloud")
    if not 0.0 < initial_opacity < 1.0:
        raise ValueError("initial_opacity must lie strictly in (0, 1)")
    if n >= 4:
        tree = cKDTree(cloud.positions)
        dists, _ = tree.query(cloud.positions, k=4)
        mean_nn = dists[:, 1:].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-6)
    else:
        logger.warning("init_from_cloud: only %d points, using fallback scale", n)
        mean_nn = np.full(n, fallback_scale)
    logit = float(np.log(initial_opacity / (1.0 - initial_opacity)))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianScene(
        positions=cloud.positions.copy(),
        log_scales=np.log(mean_nn)[:, None].repeat(3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, logit),
        colors=cloud.colors.copy(),
        timestamp=timestamp,
    )


def drop_grazing(scene: GaussianScene, cameras) -> GaussianScene:
    """Remove Gaussians a camera could only see through projection blowup.

    A surface element nearly coplanar with a camera center projects
    with an enormous 2D covariance (the EWA Jacobian grows with the
    off-axis tangent), so a splat physically invisible at 85 degrees
    off axis can smear across the whole image and drag a huge tile
    footprint with it.  This keeps only Gaussians that are either
    plausibly inside some camera's field of view or whose projected
    extent never reaches the image; the pathological remainder is cut.

    `cameras` is any iterable of cameras (a rig works).  Typical uses:
    cleaning a synthetic ground-truth scene against its capture rig,
    and pruning a cloud-initialized scene before training.
    """
    keep = np.ones(scene.count, dtype=bool)
    cutoff = 1.0 / 255.0
    opac = scene.opacities()
    amp = np.maximum(opac / cutoff, 1.0)
    for cam in cameras:
        proj = project_gaussians(scene, cam)
        valid = proj["valid"]
        t = proj["cam_t"]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.hypot(t[:, 0], t[:, 1]) / np.maximum(t[:, 2], 1e-12)
        radius = np.sqrt(2.0 * np.log(amp) * np.maximum(proj["lam_max"], 0.0)) + 1.0
        m = proj["mean2d"]
        w, h = cam.intrinsics.width, cam.intrinsics.height
        touches = (
            (m[:, 0] + radius >= 0)
            & (m[:, 0] - radius < w)
            & (m[:, 1] + radius >= 0)
            & (m[:, 1] - radius < h)
        )
        half_diag = np.hypot(w / 2, h / 2) / min(cam.intrinsics.fx, cam.intrinsics.fy)
        grazing = valid & (ratio > max(2.0, 3.0 * half_diag))
        keep &= ~(touches & grazing)
    return GaussianScene(
        positions=scene.positions[keep].copy(),
        log_scales=scene.log_scales[keep].copy(),
        rotations=scene.rotations[keep].copy(),
        opacity_logits=scene.opacity_logits[keep].copy(),
        colors=scene.colors[keep].copy(),
        timestamp=scene.timestamp,
    )


# ---------------------------------------------------------------------------
# EGSP scene binary format: 16-byte header (magic "EGSP", u32 version,
# u32 count, u32 reserved) then count records of 14 little-endian f32:
# position xyz, log scale xyz, rotation wxyz, opacity logit, rgb.
# ---------------------------------------------------------------------------


def save_scene(scene: GaussianScene, path: str | Path) -> None:
    n = len(scene)
    header = EGSP_MAGIC + struct.pack("<III", EGSP_VERSION, n, 0)
    rec = np.empty((n, FLOATS_PER_GAUSSIAN), dtype="<f4")
    rec[:, 0:3] = scene.positions
    rec[:, 3:6] = scene.log_scales
    rec[:, 6:10] = scene.rotations
    rec[:, 10] = scene.opacity_logits
    rec[:, 11:14] = scene.colors
    Path(path).write_bytes(header + rec.tobytes())


def load_scene(path: str | Path, timestamp: int = 0) -> GaussianScene:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise SceneFormatError(f"{path}: truncated header, {len(raw)} bytes < 16")
    if raw[:4] != EGSP_MAGIC:
        raise SceneFormatError(f"{path}: bad magic {raw[:4]!r} at offset 0, expected {EGSP_MAGIC!r}")
    version, count, _ = struct.unpack("<III", raw[4:16])
    if version != EGSP_VERSION:
        raise SceneFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 16 + count * FLOATS_PER_GAUSSIAN * 4
    if len(raw) != expected:
        raise SceneFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for "
            f"{count} records, got {len(raw)}"
        )
    rec = np.frombuffer(raw[16:], dtype="<f4").reshape(count, FLOATS_PER_GAUSSIAN)
    rec = rec.astype(np.float64)
    return GaussianScene(
        positions=rec[:, 0:3],
        log_scales=rec[:, 3:6],
        rotations=rec[:, 6:10],
        opacity_logits=rec[:, 10],
        colors=rec[:, 11:14],
        timestamp=timestamp,
    )
