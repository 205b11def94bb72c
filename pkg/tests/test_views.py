"""Unit tests for posed views, roles, and holdout leakage guards."""

from __future__ import annotations

import numpy as np
import pytest

from splatrig.geometry import Camera, Intrinsics, Pose
from splatrig.views import (
    ROLE_AUGMENTED,
    ROLE_CAPTURED,
    ROLE_HOLDOUT,
    LeakageError,
    PosedView,
    ViewSet,
)


def make_camera(cam_id="cam") -> Camera:
    intr = Intrinsics(fx=40.0, fy=40.0, cx=16.0, cy=12.0, width=32, height=24)
    return Camera(intrinsics=intr, pose=Pose.identity(), id=cam_id)


def make_view(role=ROLE_CAPTURED, name="", cam_id="cam") -> PosedView:
    return PosedView(
        camera=make_camera(cam_id), image=np.zeros((24, 32, 3)), role=role, name=name
    )


def test_view_rejects_unknown_role():
    with pytest.raises(ValueError, match="role"):
        make_view(role="validation")


def test_view_rejects_wrong_image_shape():
    cam = make_camera()
    with pytest.raises(ValueError):
        PosedView(camera=cam, image=np.zeros((24, 32)))
    with pytest.raises(ValueError):
        PosedView(camera=cam, image=np.zeros((23, 32, 3)))


def test_with_role_filters():
    vs = ViewSet(
        [
            make_view(ROLE_CAPTURED, "a"),
            make_view(ROLE_HOLDOUT, "b"),
            make_view(ROLE_AUGMENTED, "c"),
            make_view(ROLE_CAPTURED, "d"),
        ]
    )
    assert [v.name for v in vs.with_role(ROLE_CAPTURED)] == ["a", "d"]
    assert [v.name for v in vs.with_role(ROLE_HOLDOUT)] == ["b"]
    assert len(vs) == 4
    assert vs[1].name == "b"


def test_assert_no_holdout_passes_clean_set():
    ViewSet([make_view(ROLE_CAPTURED), make_view(ROLE_AUGMENTED)]).assert_no_holdout()


def test_assert_no_holdout_names_the_leak():
    vs = ViewSet([make_view(ROLE_CAPTURED, "ok"), make_view(ROLE_HOLDOUT, "right_eval")])
    with pytest.raises(LeakageError, match="right_eval"):
        vs.assert_no_holdout()


def test_leak_falls_back_to_camera_id():
    vs = ViewSet([make_view(ROLE_HOLDOUT, name="", cam_id="cam_r")])
    with pytest.raises(LeakageError, match="cam_r"):
        vs.assert_no_holdout()
