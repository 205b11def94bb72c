"""Unit tests for auxiliary pose sampling, refiners, and the external protocol."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import kstest

from splatrig.augment import (
    AugmentConfig,
    RefinementError,
    Refiner,
    build_augmented_set,
    hole_fill,
    refine,
    run_external_refiner,
    sample_aux_poses,
)
from splatrig.geometry import Camera, CameraRig, Intrinsics, Pose, project
from splatrig.raster import warm_up
from splatrig.splats import GaussianScene
from splatrig.views import ROLE_AUGMENTED


@pytest.fixture(scope="module", autouse=True)
def compiled_kernels():
    warm_up()


def make_camera(cam_id="cam", t=(0.0, 0.0, 0.0)) -> Camera:
    intr = Intrinsics(fx=60.0, fy=60.0, cx=24.0, cy=18.0, width=48, height=36)
    return Camera(intrinsics=intr, pose=Pose(np.array([1.0, 0, 0, 0]), np.array(t)), id=cam_id)


CENTER = np.array([0.0, 0.0, 1.5])


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(n_per_camera=-1)
    with pytest.raises(ValueError):
        AugmentConfig(radius=0.0)


def test_refiner_validation():
    with pytest.raises(ValueError):
        Refiner(kind="diffusion")
    with pytest.raises(ValueError):
        Refiner(kind="external")
    with pytest.raises(ValueError):
        Refiner(kind="identity", command="echo")
    Refiner(kind="external", command="true")  # valid


# ---------------------------------------------------------------------------
# Pose sampling
# ---------------------------------------------------------------------------


def test_sample_aux_poses_count_ids_and_radius():
    cam = make_camera()
    cfg = AugmentConfig(n_per_camera=40, radius=0.4, seed=2)
    cams = sample_aux_poses(cam, cfg, CENTER)
    assert len(cams) == 40
    assert len({c.id for c in cams}) == 40
    assert all(c.id.startswith("cam_aux") for c in cams)
    toward = CENTER - cam.pose.t
    toward /= np.linalg.norm(toward)
    for aux in cams:
        offset = aux.pose.t - cam.pose.t
        assert np.linalg.norm(offset) <= 0.4 + 1e-12
        assert offset @ toward >= 0.0
        assert aux.intrinsics == cam.intrinsics


def test_sample_aux_poses_aim_at_scene_center():
    cam = make_camera(t=(0.3, -0.2, 0.1))
    cfg = AugmentConfig(n_per_camera=10, radius=0.3, seed=5)
    for aux in sample_aux_poses(cam, cfg, CENTER):
        px, z = project(aux, CENTER)
        assert z > 0
        assert np.allclose(px, [24.0, 18.0], atol=1e-9)


def test_sample_aux_poses_deterministic():
    cam = make_camera()
    cfg = AugmentConfig(n_per_camera=8, radius=0.4, seed=3)
    a = sample_aux_poses(cam, cfg, CENTER)
    b = sample_aux_poses(cam, cfg, CENTER)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.pose.t, cb.pose.t)
        assert np.array_equal(ca.pose.q, cb.pose.q)


def test_sample_aux_poses_uniform_in_ball():
    # Uniform density in a ball means r^3 / R^3 is uniform on [0, 1]; the
    # facing-hemisphere rejection only constrains direction, not radius.
    cam = make_camera()
    cfg = AugmentConfig(n_per_camera=20000, radius=0.4, seed=7)
    cams = sample_aux_poses(cam, cfg, CENTER)
    r = np.array([np.linalg.norm(c.pose.t - cam.pose.t) for c in cams])
    stat = kstest((r / 0.4) ** 3, "uniform").statistic
    assert stat < 0.012


def test_sample_aux_poses_center_collision():
    cam = make_camera(t=(0.0, 0.0, 1.5))
    with pytest.raises(ValueError):
        sample_aux_poses(cam, AugmentConfig(n_per_camera=1), CENTER)


# ---------------------------------------------------------------------------
# hole_fill
# ---------------------------------------------------------------------------


def test_hole_fill_takes_nearest_covered_color():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(4, 4, 3))
    alpha = np.ones((4, 4))
    alpha[0, :] = 0.0  # whole top row uncovered; nearest cover is row 1
    out = hole_fill(img, alpha)
    assert np.array_equal(out[0], img[1])
    assert np.array_equal(out[1:], img[1:])


def test_hole_fill_no_holes_returns_copy():
    img = np.full((3, 3, 3), 0.5)
    out = hole_fill(img, np.ones((3, 3)))
    out[0, 0, 0] = 9.0
    assert img[0, 0, 0] == 0.5


def test_hole_fill_everything_uncovered_warns():
    img = np.full((3, 3, 3), 0.25)
    with pytest.warns(UserWarning):
        out = hole_fill(img, np.zeros((3, 3)))
    assert np.array_equal(out, img)


def test_refine_validates_shapes():
    with pytest.raises(ValueError):
        refine(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)), Refiner())


# ---------------------------------------------------------------------------
# External refiner protocol
# ---------------------------------------------------------------------------

COPY_SCRIPT = """\
import argparse, pathlib, shutil
p = argparse.ArgumentParser()
p.add_argument("--rendered"); p.add_argument("--reference"); p.add_argument("--out")
a = p.parse_args()
for f in sorted(pathlib.Path(a.rendered).glob("view_*.png")):
    shutil.copy(f, pathlib.Path(a.out) / f.name)
"""

FIRST_ONLY_SCRIPT = """\
import argparse, pathlib, shutil
p = argparse.ArgumentParser()
p.add_argument("--rendered"); p.add_argument("--reference"); p.add_argument("--out")
a = p.parse_args()
src = pathlib.Path(a.rendered) / "view_0000.png"
shutil.copy(src, pathlib.Path(a.out) / src.name)
"""

CROP_SCRIPT = """\
import argparse, pathlib
from PIL import Image
p = argparse.ArgumentParser()
p.add_argument("--rendered"); p.add_argument("--reference"); p.add_argument("--out")
a = p.parse_args()
for f in sorted(pathlib.Path(a.rendered).glob("view_*.png")):
    im = Image.open(f)
    im.crop((0, 0, im.width // 2, im.height)).save(pathlib.Path(a.out) / f.name)
"""


def script_command(tmp_path, body, name) -> str:
    path = tmp_path / name
    path.write_text(body)
    return f"python3 {path}"


def test_run_external_refiner_copy_through(tmp_path):
    rng = np.random.default_rng(4)
    imgs = [rng.uniform(size=(12, 16, 3)) for _ in range(3)]
    refs = [rng.uniform(size=(12, 16, 3)) for _ in range(3)]
    cmd = script_command(tmp_path, COPY_SCRIPT, "copy.py")
    out = run_external_refiner(imgs, refs, cmd)
    assert all(o is not None for o in out)
    for o, img in zip(out, imgs):
        # The protocol is 8-bit PNG, so copy-through equals quantization.
        assert np.array_equal(o, np.round(img * 255.0) / 255.0)


def test_run_external_refiner_crash_fails_all(tmp_path):
    cmd = script_command(tmp_path, "raise SystemExit(3)", "crash.py")
    out = run_external_refiner([np.zeros((8, 8, 3))], [np.zeros((8, 8, 3))], cmd)
    assert out == [None]


def test_run_external_refiner_partial_output(tmp_path):
    rng = np.random.default_rng(5)
    imgs = [rng.uniform(size=(8, 8, 3)) for _ in range(3)]
    cmd = script_command(tmp_path, FIRST_ONLY_SCRIPT, "first.py")
    out = run_external_refiner(imgs, imgs, cmd)
    assert out[0] is not None
    assert out[1] is None and out[2] is None


def test_run_external_refiner_shape_change_dropped(tmp_path):
    rng = np.random.default_rng(6)
    imgs = [rng.uniform(size=(8, 8, 3))]
    cmd = script_command(tmp_path, CROP_SCRIPT, "crop.py")
    out = run_external_refiner(imgs, imgs, cmd)
    assert out == [None]


def test_run_external_refiner_missing_binary():
    out = run_external_refiner(
        [np.zeros((8, 8, 3))], [np.zeros((8, 8, 3))], "/no/such/refiner_binary"
    )
    assert out == [None]


def test_refine_external_failure_raises(tmp_path):
    cmd = script_command(tmp_path, "raise SystemExit(1)", "boom.py")
    with pytest.raises(RefinementError):
        refine(
            np.zeros((8, 8, 3)),
            np.zeros((8, 8, 3)),
            np.ones((8, 8)),
            Refiner(kind="external", command=cmd),
        )


# ---------------------------------------------------------------------------
# build_augmented_set
# ---------------------------------------------------------------------------


def demo_scene(n=12, seed=8) -> GaussianScene:
    rng = np.random.default_rng(seed)
    return GaussianScene(
        positions=np.column_stack(
            [rng.uniform(-0.3, 0.3, n), rng.uniform(-0.2, 0.2, n), rng.uniform(1.2, 1.8, n)]
        ),
        log_scales=np.full((n, 3), np.log(0.08)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, 2.0),
        colors=rng.uniform(size=(n, 3)),
    )


def test_build_augmented_set_external_copy_equals_identity(tmp_path):
    scene = demo_scene()
    rig = CameraRig([make_camera("a"), make_camera("b", t=(0.1, 0.0, 0.0))])
    cfg = AugmentConfig(n_per_camera=3, radius=0.3, seed=11)
    ident = build_augmented_set(scene, rig, cfg, Refiner("identity"), scene_center=CENTER)
    cmd = script_command(tmp_path, COPY_SCRIPT, "copy.py")
    ext = build_augmented_set(
        scene, rig, cfg, Refiner("external", command=cmd), scene_center=CENTER
    )
    assert len(ident) == len(ext) == 6
    for vi, ve in zip(ident, ext):
        assert vi.name == ve.name
        assert vi.role == ve.role == ROLE_AUGMENTED
        assert np.array_equal(vi.image, ve.image)
        assert np.array_equal(vi.camera.pose.t, ve.camera.pose.t)


def test_build_augmented_set_crashing_refiner_drops_views(tmp_path):
    scene = demo_scene()
    rig = CameraRig([make_camera("a")])
    cfg = AugmentConfig(n_per_camera=4, radius=0.3, seed=12)
    cmd = script_command(tmp_path, "raise SystemExit(9)", "die.py")
    views = build_augmented_set(
        scene, rig, cfg, Refiner("external", command=cmd), scene_center=CENTER
    )
    assert len(views) == 0  # dropped, not raised
