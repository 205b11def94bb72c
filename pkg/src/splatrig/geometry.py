"""Camera models, rigid transforms, and pinhole projection math.

Conventions used throughout the package:
  - World and camera frames are right-handed; camera looks along +z,
    +x right, +y down (image v grows downward).
  - A :class:`Pose` is camera-to-world: ``x_world = R @ x_cam + t``,
    so ``t`` is the camera center in world coordinates.
  - Quaternions are stored (w, x, y, z) and kept unit-norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

QUAT_ATOL = 1e-9


class InvalidDepthError(ValueError):
    """Raised when an unprojection is requested at a non-positive depth."""


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a 3x3 rotation matrix to a unit quaternion (w, x, y, z).

    Uses the numerically stable branch selection on the largest diagonal
    term; the returned quaternion has w >= 0.
    """
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array(
            [0.25 / s, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for a rotation vector (Rodrigues formula)."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    k = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    if theta < 1e-10:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * k
        + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)
    )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels; skew is fixed to zero."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (unit quaternion + camera center)."""

    q: np.ndarray  # (4,) w, x, y, z
    t: np.ndarray  # (3,) meters

    def __post_init__(self) -> None:
        q = quat_normalize(self.q)
        t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(rotmat_to_quat(R), t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world-frame; points is (..., 3)."""
        return points @ self.R.T + self.t


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a∘b as transforms: (a∘b)(x) = a(b(x))."""
    return Pose(quat_multiply(a.q, b.q), a.R @ b.t + a.t)


def invert(a: Pose) -> Pose:
    """Inverse transform: invert(a)∘a = identity."""
    qw, qx, qy, qz = a.q
    q_inv = np.array([qw, -qx, -qy, -qz])
    return Pose(q_inv, -(a.R.T @ a.t))


@dataclass(frozen=True)
class Camera:
    """A posed pinhole camera with a rig-unique id."""

    intrinsics: Intrinsics
    pose: Pose
    id: str = "cam"

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return (points - self.pose.t) @ self.pose.R


def project(cam: Camera, point: np.ndarray) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel (u, v), camera-frame depth).

    A non-positive depth flags the point as behind the camera; the pixel
    coordinates are then meaningless but no error is raised.
    """
    p = cam.world_to_camera(np.asarray(point, dtype=np.float64))
    z = float(p[2])
    if z == 0.0:
        return np.array([np.nan, np.nan]), 0.0
    intr = cam.intrinsics
    u = intr.fx * p[0] / z + intr.cx
    v = intr.fy * p[1] / z + intr.cy
    return np.array([u, v]), z


def project_many(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project` for an (N, 3) array; returns (N, 2), (N,)."""
    p = cam.world_to_camera(np.asarray(points, dtype=np.float64))
    z = p[:, 2]
    intr = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[:, 0] / z + intr.cx
        v = intr.fy * p[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def unproject(cam: Camera, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Lift a pixel at a camera-frame depth (meters) to a world point."""
    if depth <= 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    intr = cam.intrinsics
    u, v = pixel
    p_cam = np.array(
        [depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth]
    )
    return cam.pose.apply(p_cam)


def unproject_many(cam: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized :func:`unproject` for (N, 2) pixels and (N,) depths."""
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise InvalidDepthError("all depths must be positive")
    intr = cam.intrinsics
    x = depths * (pixels[:, 0] - intr.cx) / intr.fx
    y = depths * (pixels[:, 1] - intr.cy) / intr.fy
    return cam.pose.apply(np.stack([x, y, depths], axis=1))


@dataclass
class CameraRig:
    """An ordered collection of cameras with unique ids."""

    cameras: list[Camera] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate camera ids in rig: {ids}")

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, cam_id: str) -> Camera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(f"no camera {cam_id!r} in rig")

    def __contains__(self, cam_id: str) -> bool:
        return any(c.id == cam_id for c in self.cameras)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]


def rig_to_json(rig: CameraRig) -> list[dict]:
    """Serialize a rig to the interchange schema (list of camera records)."""
    out = []
    for cam in rig:
        intr = cam.intrinsics
        out.append(
            {
                "id": cam.id,
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "width": intr.width,
                "height": intr.height,
                "q": [float(x) for x in cam.pose.q],
                "t": [float(x) for x in cam.pose.t],
            }
        )
    return out


def rig_from_json(records: list[dict]) -> CameraRig:
    """Parse the rig interchange schema produced by :func:`rig_to_json`."""
    cams = []
    for rec in records:
        intr = Intrinsics(
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
        )
        pose = Pose(np.array(rec["q"], dtype=np.float64), np.array(rec["t"], dtype=np.float64))
        cams.append(Camera(intrinsics=intr, pose=pose, id=str(rec["id"])))
    return CameraRig(cams)


def save_rig(rig: CameraRig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(rig_to_json(rig), indent=2) + "\n")


def load_rig(path: str | Path) -> CameraRig:
    return rig_from_json(json.loads(Path(path).read_text()))


def look_at(
    eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None
) -> Pose:
    """Build a camera-to-world pose at `eye` looking toward `target`.

    `up` is the world-frame up hint (defaults to +z); the camera's image
    +y axis points opposite to it, matching v-down image coordinates.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
    forward = target - eye
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("eye and target coincide")
    z = forward / n
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    # Degenerate when looking straight along up: pick any perpendicular.
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(x) < 1e-12:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose.from_matrix(R, eye)
