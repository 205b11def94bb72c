"""Posed images with role tags.

Roles drive the training protocol: `captured` views feed the warm-up
stage, `augmented` views join for refinement, and `holdout` views are
reserved for evaluation and must never be trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .geometry import Camera

ROLE_CAPTURED = "captured"
ROLE_AUGMENTED = "augmented"
ROLE_HOLDOUT = "holdout"
_ROLES = (ROLE_CAPTURED, ROLE_AUGMENTED, ROLE_HOLDOUT)


class LeakageError(RuntimeError):
    """A held-out view was about to enter a training set."""


@dataclass
class PosedView:
    """One image with the camera that produced it and a protocol role."""

    camera: Camera
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    role: str = ROLE_CAPTURED
    name: str = ""

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown view role {self.role!r}, expected one of {_ROLES}")
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"view image must be (H, W, 3), got {img.shape}")
        if img.shape[0] != self.camera.intrinsics.height or img.shape[1] != self.camera.intrinsics.width:
            raise ValueError(
                f"view image {img.shape[:2]} does not match camera "
                f"{(self.camera.intrinsics.height, self.camera.intrinsics.width)}"
            )
        self.image = img


@dataclass
class ViewSet:
    """An ordered collection of posed views."""

    views: list[PosedView] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self) -> Iterator[PosedView]:
        return iter(self.views)

    def __getitem__(self, i: int) -> PosedView:
        return self.views[i]

    def with_role(self, role: str) -> "ViewSet":
        return ViewSet([v for v in self.views if v.role == role])

    def assert_no_holdout(self) -> None:
        """Guard a training set against evaluation leakage."""
        leaked = [v.name or v.camera.id for v in self.views if v.role == ROLE_HOLDOUT]
        if leaked:
            raise LeakageError(f"held-out views in a training set: {leaked}")
