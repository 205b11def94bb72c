"""Auxiliary view synthesis around each capture camera.

After the warm-up training stage, extra cameras are scattered in a
half-ball in front of every real camera, rendered with the current
scene, optionally run through a refiner that repairs coverage holes,
and fed back into training as augmented views.  Augmented views carry
a role tag so they can never leak into evaluation statistics.
"""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .geometry import Camera, CameraRig, look_at
from .images import from_uint8, load_png, save_png, to_uint8
from .splats import GaussianScene, RenderSettings, rasterize
from .views import ROLE_AUGMENTED, PosedView, ViewSet

log = logging.getLogger(__name__)

REFINER_KINDS = ("identity", "hole_fill", "external")


class RefinementError(RuntimeError):
    """An external refiner failed or returned unusable output."""


@dataclass(frozen=True)
class AugmentConfig:
    n_per_camera: int = 15
    radius: float = 0.4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_camera < 0:
            raise ValueError("n_per_camera must be >= 0")
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class Refiner:
    """How a rendered auxiliary view gets cleaned up before training.

    `identity` passes renders through untouched, `hole_fill` paints
    low-coverage pixels from their nearest covered neighbor, and
    `external` hands a whole batch to a subprocess (see
    :func:`run_external_refiner` for the directory protocol).
    """

    kind: str = "identity"
    command: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in REFINER_KINDS:
            raise ValueError(f"unknown refiner kind {self.kind!r}; use one of {REFINER_KINDS}")
        if self.kind == "external" and not self.command:
            raise ValueError("external refiner needs a command")
        if self.kind != "external" and self.command:
            raise ValueError(f"{self.kind} refiner takes no command")


def sample_aux_poses(
    cam: Camera,
    cfg: AugmentConfig,
    scene_center: np.ndarray,
    rng: np.random.Generator | None = None,
) -> list[Camera]:
    """Cameras scattered in the half-ball facing the scene center.

    Offsets are drawn uniformly from the radius-R ball around the
    source camera center and rejected when they point away from the
    scene (negative component along camera-to-center).  Each result
    keeps the source intrinsics and is re-aimed at `scene_center`
    using the source camera's up vector.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    scene_center = np.asarray(scene_center, dtype=np.float64)
    source = cam.pose.t
    toward = scene_center - source
    norm = np.linalg.norm(toward)
    if norm < 1e-9:
        raise ValueError("scene center coincides with the camera center")
    toward = toward / norm
    up = -cam.pose.R[:, 1]  # image +y looks down, so the camera's up is -y

    out: list[Camera] = []
    k = 0
    while len(out) < cfg.n_per_camera:
        d = rng.normal(size=3)
        dn = np.linalg.norm(d)
        if dn < 1e-12:
            continue
        offset = d / dn * cfg.radius * rng.uniform() ** (1.0 / 3.0)
        if float(offset @ toward) < 0.0:
            continue
        k += 1
        pose = look_at(source + offset, scene_center, up)
        out.append(Camera(cam.intrinsics, pose, id=f"{cam.id}_aux{len(out):02d}"))
    return out


def hole_fill(rendered: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Replace pixels with coverage below 0.5 by the nearest covered color."""
    invalid = alpha < 0.5
    if not invalid.any():
        return rendered.copy()
    if invalid.all():
        warnings.warn("hole_fill: no covered pixels to fill from; image left as is")
        return rendered.copy()
    _, (iy, ix) = distance_transform_edt(invalid, return_indices=True)
    return rendered[iy, ix]


def refine(
    rendered: np.ndarray,
    reference: np.ndarray,
    alpha: np.ndarray,
    refiner: Refiner,
) -> np.ndarray:
    """Clean up one rendered view; shape and value range are preserved."""
    if rendered.shape != reference.shape or rendered.shape[:2] != alpha.shape:
        raise ValueError(
            f"rendered {rendered.shape}, reference {reference.shape} and "
            f"alpha {alpha.shape} must be congruent"
        )
    if refiner.kind == "identity":
        return rendered.copy()
    if refiner.kind == "hole_fill":
        return hole_fill(rendered, alpha)
    out = run_external_refiner([rendered], [reference], refiner.command)
    if out[0] is None:
        raise RefinementError(f"external refiner {refiner.command!r} failed")
    return out[0]


def run_external_refiner(
    rendered: list[np.ndarray],
    references: list[np.ndarray],
    command: str,
) -> list[np.ndarray | None]:
    """Invoke `<command> --rendered <dir> --reference <dir> --out <dir>`.

    Both input directories hold 8-bit PNGs named view_%04d.png plus a
    manifest.json listing the pairs; the process must write congruent
    PNGs under the same names into --out and exit 0.  Views whose
    output is missing or the wrong shape come back as None; a nonzero
    exit marks every view failed.
    """
    results: list[np.ndarray | None] = [None] * len(rendered)
    with tempfile.TemporaryDirectory(prefix="refine_") as tmp:
        rdir = Path(tmp) / "rendered"
        fdir = Path(tmp) / "reference"
        odir = Path(tmp) / "out"
        for d in (rdir, fdir, odir):
            d.mkdir()
        pairs = []
        for i, (img, ref) in enumerate(zip(rendered, references)):
            name = f"view_{i:04d}.png"
            save_png(img, rdir / name)
            save_png(ref, fdir / name)
            pairs.append({"index": i, "rendered": name, "reference": name})
        manifest = json.dumps({"pairs": pairs}, indent=2)
        (rdir / "manifest.json").write_text(manifest)
        (fdir / "manifest.json").write_text(manifest)

        argv = [*command.split(), "--rendered", str(rdir), "--reference", str(fdir), "--out", str(odir)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=600)
        except (OSError, subprocess.TimeoutExpired) as exc:
            log.warning("external refiner failed to run: %s", exc)
            return results
        if proc.returncode != 0:
            log.warning(
                "external refiner exited %d: %s",
                proc.returncode,
                proc.stderr.decode(errors="replace")[-500:],
            )
            return results
        for i, img in enumerate(rendered):
            path = odir / f"view_{i:04d}.png"
            if not path.is_file():
                log.warning("external refiner wrote no output for view %d", i)
                continue
            try:
                out = load_png(path)
            except Exception as exc:  # malformed PNG counts as a failed view
                log.warning("external refiner output for view %d unreadable: %s", i, exc)
                continue
            if out.shape != img.shape:
                log.warning(
                    "external refiner changed view %d shape %s -> %s",
                    i,
                    img.shape,
                    out.shape,
                )
                continue
            results[i] = out
    return results


def build_augmented_set(
    scene: GaussianScene,
    rig: CameraRig,
    cfg: AugmentConfig,
    refiner: Refiner,
    scene_center: np.ndarray | None = None,
    references: dict[str, np.ndarray] | None = None,
    settings: RenderSettings | None = None,
) -> ViewSet:
    """Render, refine and tag auxiliary views around every rig camera.

    `scene_center` defaults to the scene's mean Gaussian position (the
    stand-in for the fused-cloud centroid once training has started).
    `references` optionally maps camera id to that camera's captured
    image; the source camera's own render stands in when absent.
    Failed refinements drop their view, so the result can be smaller
    than len(rig) * n_per_camera; the count is logged either way.

    Views are 8-bit quantized exactly like real captures, so a
    copy-through external refiner reproduces the identity refiner
    bit for bit.
    """
    settings = settings or RenderSettings()
    if scene_center is None:
        scene_center = scene.positions.mean(axis=0)
    rng = np.random.default_rng(cfg.seed)

    rendered: list[np.ndarray] = []
    alphas: list[np.ndarray] = []
    refs: list[np.ndarray] = []
    cams: list[Camera] = []
    for cam in rig:
        if references is not None and cam.id in references:
            ref_img = np.asarray(references[cam.id], dtype=np.float64)
        else:
            ref_img = rasterize(scene, cam, settings).color
        for aux in sample_aux_poses(cam, cfg, scene_center, rng):
            out = rasterize(scene, aux, settings)
            rendered.append(out.color)
            alphas.append(out.alpha)
            refs.append(ref_img)
            cams.append(aux)

    views: list[PosedView] = []
    if refiner.kind == "external" and rendered:
        refined = run_external_refiner(rendered, refs, refiner.command)
        for cam, img in zip(cams, refined):
            if img is None:
                continue
            views.append(PosedView(cam, img, ROLE_AUGMENTED, cam.id))
    else:
        for cam, img, ref, alpha in zip(cams, rendered, refs, alphas):
            refined = refine(img, ref, alpha, refiner)
            refined = from_uint8(to_uint8(refined))
            views.append(PosedView(cam, refined, ROLE_AUGMENTED, cam.id))

    dropped = len(cams) - len(views)
    if dropped:
        log.warning("augmented set: dropped %d of %d views", dropped, len(cams))
    log.info("augmented set: %d views", len(views))
    return ViewSet(views)
