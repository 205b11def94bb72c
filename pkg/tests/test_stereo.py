"""Unit tests for block matching, depth fusion, cloud filtering, and IO."""

from __future__ import annotations

import numpy as np
import pytest

from splatrig.geometry import Camera, CameraRig, Intrinsics, Pose
from splatrig.stereo import (
    ConfigurationError,
    DepthMap,
    FusedPointCloud,
    block_match,
    disparity_to_depth,
    fuse,
    load_depth,
    load_ply,
    remove_outliers,
    save_depth,
    save_ply,
    voxel_downsample,
)

# ---------------------------------------------------------------------------
# Block matching
# ---------------------------------------------------------------------------


def make_shifted_pair(h: int, w: int, disp: int, seed: int = 0):
    """Rectified pair of a fronto-parallel textured plane at constant disparity.

    The right image is the left shifted by `disp` pixels (features move
    left), so SAD cost is exactly zero at the true disparity.
    """
    rng = np.random.default_rng(seed)
    left = rng.uniform(0.0, 1.0, size=(h, w + disp))
    right = left[:, disp:]
    return left[:, :w], right[:, :w]


def test_block_match_recovers_constant_disparity():
    disp_true = 7
    left, right = make_shifted_pair(40, 80, disp_true)
    disp = block_match(left, right, max_disparity=16, window=5)
    interior = disp[:, 16:]
    assert np.all(interior == disp_true)


def test_block_match_zero_disparity_identical_images():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(30, 50))
    disp = block_match(img, img, max_disparity=10, window=5)
    assert np.all(disp == 0.0)


def test_block_match_marks_unmatched_columns_invalid():
    # Columns left of the true disparity cannot contain the match, and the
    # left-right check advertises a 1 px tolerance, so anything that is not
    # rejected outright must be within 1 px of the truth.
    disp_true = 9
    left, right = make_shifted_pair(30, 60, disp_true, seed=2)
    disp = block_match(left, right, max_disparity=16, window=5)
    assert np.all(disp[:, : disp_true - 1] == -1.0)
    accepted = disp[disp >= 0]
    assert np.all(np.abs(accepted - disp_true) <= 1.0)
    assert np.mean(accepted == disp_true) > 0.99


def test_block_match_validates_inputs():
    a = np.zeros((10, 20))
    with pytest.raises(ValueError):
        block_match(a, np.zeros((10, 21)))
    with pytest.raises(ValueError):
        block_match(a, a, max_disparity=20)


# ---------------------------------------------------------------------------
# Disparity to depth
# ---------------------------------------------------------------------------


def test_disparity_to_depth_hand_value():
    # z = fx * baseline / d = 100 * 0.1 / 5 = 2 meters.
    disp = np.array([[5.0, -1.0, 0.0]])
    dm = disparity_to_depth(disp, fx=100.0, baseline=0.1, camera="left")
    assert dm.values[0, 0] == 2.0
    assert dm.values[0, 1] == 0.0
    assert dm.values[0, 2] == 0.0
    assert dm.camera == "left"


def test_disparity_to_depth_z_max_cutoff():
    disp = np.array([[0.001]])
    dm = disparity_to_depth(disp, fx=100.0, baseline=0.1, z_max=8.0)
    assert dm.values[0, 0] == 0.0


def test_disparity_to_depth_rejects_bad_baseline():
    with pytest.raises(ValueError):
        disparity_to_depth(np.ones((2, 2)), fx=100.0, baseline=0.0)


def test_depth_map_validation():
    with pytest.raises(ValueError):
        DepthMap(values=np.array([[np.nan]]), camera="c")
    with pytest.raises(ValueError):
        DepthMap(values=np.array([[-0.5]]), camera="c")
    dm = DepthMap(values=np.array([[1.0, 0.0]]), camera="c")
    assert dm.valid_mask.tolist() == [[True, False]]


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------


def make_rig() -> CameraRig:
    intr = Intrinsics(fx=50.0, fy=50.0, cx=2.0, cy=1.5, width=4, height=3)
    return CameraRig([Camera(intrinsics=intr, pose=Pose.identity(), id="left")])


def test_fuse_unprojects_valid_pixels():
    rig = make_rig()
    depth = np.zeros((3, 4))
    depth[1, 2] = 2.0  # pixel (u=2, v=1) at principal-ish point
    img = np.zeros((3, 4, 3))
    img[1, 2] = [0.2, 0.4, 0.6]
    cloud = fuse([DepthMap(values=depth, camera="left")], {"left": img}, rig)
    assert len(cloud) == 1
    # u = cx exactly, v = cy - 0.5: x = 0, y = 2 * (1 - 1.5) / 50 = -0.02.
    assert np.allclose(cloud.positions[0], [0.0, -0.02, 2.0])
    assert np.allclose(cloud.colors[0], [0.2, 0.4, 0.6])
    assert cloud.source_pixel[0].tolist() == [2, 1]
    assert cloud.camera_ids == ["left"]


def test_fuse_point_count_equals_valid_pixels():
    rig = make_rig()
    rng = np.random.default_rng(1)
    depth = rng.uniform(1.0, 3.0, size=(3, 4))
    depth[0, :] = 0.0
    img = rng.uniform(size=(3, 4, 3))
    cloud = fuse([DepthMap(values=depth, camera="left")], {"left": img}, rig)
    assert len(cloud) == int((depth > 0).sum())


def test_fuse_unknown_camera_raises():
    rig = make_rig()
    dm = DepthMap(values=np.ones((3, 4)), camera="ghost")
    with pytest.raises(ConfigurationError):
        fuse([dm], {"ghost": np.zeros((3, 4, 3))}, rig)


def test_fuse_all_invalid_returns_empty():
    rig = make_rig()
    dm = DepthMap(values=np.zeros((3, 4)), camera="left")
    cloud = fuse([dm], {"left": np.zeros((3, 4, 3))}, rig)
    assert len(cloud) == 0


# ---------------------------------------------------------------------------
# Voxel downsampling and outlier removal
# ---------------------------------------------------------------------------


def cloud_from_points(pts, colors=None) -> FusedPointCloud:
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    return FusedPointCloud(
        positions=pts,
        colors=np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64),
        source_camera=np.zeros(n, dtype=np.int32),
        source_pixel=np.arange(2 * n, dtype=np.int32).reshape(n, 2),
        camera_ids=["left"],
    )


def test_voxel_downsample_merges_to_centroid():
    cloud = cloud_from_points(
        [[0.01, 0.01, 0.01], [0.03, 0.03, 0.03], [0.12, 0.0, 0.0]],
        colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    )
    out = voxel_downsample(cloud, voxel=0.05)
    assert len(out) == 2
    order = np.argsort(out.positions[:, 0])
    merged, lone = out.positions[order[0]], out.positions[order[1]]
    assert np.allclose(merged, [0.02, 0.02, 0.02])
    assert np.allclose(lone, [0.12, 0.0, 0.0])
    assert np.allclose(out.colors[order[0]], [0.5, 0.5, 0.0])


def test_voxel_downsample_idempotent():
    rng = np.random.default_rng(17)
    cloud = cloud_from_points(rng.uniform(-1.0, 1.0, size=(500, 3)))
    once = voxel_downsample(cloud, voxel=0.2)
    twice = voxel_downsample(once, voxel=0.2)
    assert np.array_equal(once.positions, twice.positions)


def test_voxel_downsample_keeps_nearest_provenance():
    # Second point sits on the centroid, so its provenance survives.
    cloud = cloud_from_points([[0.00, 0.0, 0.0], [0.02, 0.0, 0.0], [0.04, 0.0, 0.0]])
    out = voxel_downsample(cloud, voxel=0.1)
    assert len(out) == 1
    assert out.source_pixel[0].tolist() == [2, 3]


def test_voxel_downsample_rejects_bad_voxel():
    with pytest.raises(ValueError):
        voxel_downsample(cloud_from_points([[0.0, 0.0, 0.0]]), voxel=0.0)


def test_remove_outliers_drops_far_point():
    rng = np.random.default_rng(23)
    ball = rng.normal(scale=0.01, size=(60, 3))
    pts = np.vstack([ball, [[5.0, 5.0, 5.0]]])
    out = remove_outliers(cloud_from_points(pts), k=10, std_ratio=2.0)
    assert len(out) == 60
    assert np.all(np.abs(out.positions) < 1.0)


def test_remove_outliers_small_cloud_unchanged():
    cloud = cloud_from_points([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out = remove_outliers(cloud, k=5)
    assert np.array_equal(out.positions, cloud.positions)


# ---------------------------------------------------------------------------
# EGDP depth files
# ---------------------------------------------------------------------------


def test_depth_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    values = rng.uniform(0.0, 5.0, size=(7, 11)).astype(np.float32).astype(np.float64)
    dm = DepthMap(values=values, camera="left", frame=3)
    path = tmp_path / "d.egdp"
    save_depth(dm, path)
    loaded = load_depth(path, camera="left", frame=3)
    assert np.array_equal(loaded.values, values)
    assert loaded.camera == "left" and loaded.frame == 3


def test_load_depth_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.egdp"
    p.write_bytes(b"EG")
    with pytest.raises(ValueError, match="truncated"):
        load_depth(p)
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError, match="magic"):
        load_depth(p)
    # Header promises 2x2 but payload holds one value.
    import struct

    p.write_bytes(b"EGDP" + struct.pack("<IIf", 2, 2, 0.0) + struct.pack("<f", 1.0))
    with pytest.raises(ValueError, match="bytes"):
        load_depth(p)


# ---------------------------------------------------------------------------
# PLY round trip
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    rng = np.random.default_rng(41)
    cloud = cloud_from_points(
        rng.uniform(-2.0, 2.0, size=(25, 3)), colors=rng.uniform(size=(25, 3))
    )
    path = tmp_path / "c.ply"
    save_ply(cloud, path, binary=binary)
    loaded = load_ply(path)
    assert len(loaded) == 25
    assert np.allclose(loaded.positions, cloud.positions, atol=1e-5)
    # Colors are quantized to 8 bits on write.
    assert np.allclose(loaded.colors, cloud.colors, atol=0.5 / 255.0 + 1e-12)


def test_load_ply_rejects_garbage(tmp_path):
    p = tmp_path / "junk.ply"
    p.write_bytes(b"not a ply at all")
    with pytest.raises(ValueError):
        load_ply(p)
