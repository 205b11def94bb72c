"""Metric rig calibration from three-sphere wand trajectories.

A tracked wand of three collinear spheres with known, unequal spacings
sweeps the shared view volume.  Per-frame sphere centroids from each
camera feed the pipeline: sphere labeling by distance ratios, pairwise
essential-matrix poses with RANSAC, pose chaining over a spanning tree,
DLT triangulation of sphere tracks, joint bundle adjustment with the
reference camera held fixed, and metric scale recovery from the known
sphere spacings.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Camera,
    CameraRig,
    Intrinsics,
    Pose,
    project_many,
    rotmat_to_quat,
    so3_exp,
)

logger = logging.getLogger(__name__)

SPHERE_LABELS = ("A", "B", "C")


class CalibrationError(RuntimeError):
    """Base class for calibration failures."""


class AmbiguityError(CalibrationError):
    """Sphere labels cannot be assigned confidently; skip the frame."""


class InsufficientDataError(CalibrationError):
    """Not enough observations for the requested solve."""


class DegenerateConfigurationError(CalibrationError):
    """Geometry admits no stable solution (zero baseline, parallel rays)."""


@dataclass
class WandObservation:
    """Detected sphere centroids for one camera in one frame."""

    frame: int
    camera: str
    centroids: np.ndarray  # (3, 2) pixel coordinates
    labels: tuple[str, str, str] | None = None

    def __post_init__(self) -> None:
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.shape != (3, 2):
            raise ValueError(f"expected exactly three centroids, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids contain non-finite values")
        self.centroids = c
        if self.labels is not None and sorted(self.labels) != sorted(SPHERE_LABELS):
            raise ValueError(f"labels must be a permutation of {SPHERE_LABELS}")


@dataclass(frozen=True)
class WandSpec:
    """Known inter-sphere distances of the calibration wand, in meters."""

    d_ab: float
    d_bc: float
    d_ac: float

    def __post_init__(self) -> None:
        if min(self.d_ab, self.d_bc, self.d_ac) <= 0:
            raise ValueError("wand distances must be positive")
        if abs(self.d_ab - self.d_bc) < 1e-12:
            raise ValueError("d_ab and d_bc must differ so labels are decidable")
        if self.d_ac > self.d_ab + self.d_bc + 1e-9:
            raise ValueError("wand distances violate the triangle inequality")

    def distance(self, a: str, b: str) -> float:
        key = "".join(sorted((a.lower(), b.lower())))
        return {"ab": self.d_ab, "bc": self.d_bc, "ac": self.d_ac}[key]


@dataclass
class CalibrationReport:
    """Everything a calibration run produces."""

    rig: CameraRig
    mean_reprojection_px: float
    max_reprojection_px: float
    per_camera_histograms: dict
    scale_factor: float = 1.0
    converged: bool = True
    iterations: int = 0
    points: dict = field(default_factory=dict)  # (frame, label) -> xyz

    def __post_init__(self) -> None:
        if self.mean_reprojection_px > self.max_reprojection_px + 1e-12:
            raise ValueError("mean reprojection cannot exceed max")

    def to_json(self) -> dict:
        return {
            "mean_reprojection_px": self.mean_reprojection_px,
            "max_reprojection_px": self.max_reprojection_px,
            "scale_factor": self.scale_factor,
            "converged": self.converged,
            "iterations": self.iterations,
            "per_camera_histograms": {
                cam: {"counts": [int(c) for c in h["counts"]],
                      "edges": [float(e) for e in h["edges"]]}
                for cam, h in self.per_camera_histograms.items()
            },
        }


def label_spheres(
    obs: WandObservation, spec: WandSpec, ambiguity_threshold: float = 0.04
) -> WandObservation:
    """Assign A/B/C identities by matching projected distance ratios.

    Tries all six assignments and scores each by the L1 distance between
    normalized projected inter-sphere distances and the normalized spec
    distances.  When the two best assignments score within
    `ambiguity_threshold` of each other (e.g. a near-end-on wand), the
    frame is unusable and an AmbiguityError is raised.
    """
    c = obs.centroids
    want = np.array([spec.d_ab, spec.d_bc, spec.d_ac])
    want = want / want.sum()
    scores = []
    for perm in itertools.permutations(range(3)):
        ia, ib, ic = perm
        d = np.array(
            [
                np.linalg.norm(c[ia] - c[ib]),
                np.linalg.norm(c[ib] - c[ic]),
                np.linalg.norm(c[ia] - c[ic]),
            ]
        )
        total = d.sum()
        if total < 1e-9:
            raise AmbiguityError(
                f"frame {obs.frame} camera {obs.camera}: spheres project to a point"
            )
        scores.append((float(np.abs(d / total - want).sum()), perm))
    scores.sort(key=lambda s: (s[0], s[1]))
    best_score, best_perm = scores[0]
    second_score = scores[1][0]
    if second_score - best_score < ambiguity_threshold:
        raise AmbiguityError(
            f"frame {obs.frame} camera {obs.camera}: labeling ambiguous "
            f"(scores {best_score:.4f} vs {second_score:.4f})"
        )
    labels = [""] * 3
    for lab, idx in zip(SPHERE_LABELS, best_perm):
        labels[idx] = lab
    return WandObservation(
        frame=obs.frame,
        camera=obs.camera,
        centroids=obs.centroids,
        labels=tuple(labels),
    )


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley conditioning: centroid to origin, RMS distance sqrt(2)."""
    mean = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - mean) ** 2, axis=1)))
    s = np.sqrt(2.0) / max(rms, 1e-12)
    t = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    h = np.column_stack([pts, np.ones(len(pts))])
    return (h @ t.T)[:, :2], t


def _eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Essential matrix from >= 8 normalized-coordinate correspondences."""
    na, ta = _normalize_points(xa)
    nb, tb = _normalize_points(xb)
    ha = np.column_stack([na, np.ones(len(na))])
    hb = np.column_stack([nb, np.ones(len(nb))])
    a = np.einsum("ni,nj->nij", hb, ha).reshape(len(na), 9)
    _, _, vt = np.linalg.svd(a)
    e = vt[-1].reshape(3, 3)
    # Rank-2 projection happens in the conditioned frame (closest to the
    # data), but the equal-singular-value essential structure only holds
    # in the original frame, so enforce it after denormalizing.
    u, s, vt2 = np.linalg.svd(e)
    e = u @ np.diag([s[0], s[1], 0.0]) @ vt2
    e = tb.T @ e @ ta
    u, s, vt2 = np.linalg.svd(e)
    mean_sv = (s[0] + s[1]) / 2.0
    return u @ np.diag([mean_sv, mean_sv, 0.0]) @ vt2


def _sampson_px(e: np.ndarray, pa: np.ndarray, pb: np.ndarray, ka: np.ndarray, kb: np.ndarray) -> np.ndarray:
    """Squared Sampson distance in pixels for pixel correspondences."""
    f = np.linalg.inv(kb).T @ e @ np.linalg.inv(ka)
    ha = np.column_stack([pa, np.ones(len(pa))])
    hb = np.column_stack([pb, np.ones(len(pb))])
    fa = ha @ f.T
    fb = hb @ f
    num = np.sum(hb * fa, axis=1) ** 2
    den = fa[:, 0] ** 2 + fa[:, 1] ** 2 + fb[:, 0] ** 2 + fb[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def _triangulate_pair_normalized(
    r: np.ndarray, t: np.ndarray, xa: np.ndarray, xb: np.ndarray
) -> np.ndarray:
    """DLT triangulation with P_a=[I|0], P_b=[R|t]; coords are normalized."""
    n = len(xa)
    pa = np.hstack([np.eye(3), np.zeros((3, 1))])
    pb = np.hstack([r, t.reshape(3, 1)])
    out = np.empty((n, 3))
    for i in range(n):
        a = np.stack(
            [
                xa[i, 0] * pa[2] - pa[0],
                xa[i, 1] * pa[2] - pa[1],
                xb[i, 0] * pb[2] - pb[0],
                xb[i, 1] * pb[2] - pb[1],
            ]
        )
        _, _, vt = np.linalg.svd(a)
        x = vt[-1]
        out[i] = x[:3] / x[3] if abs(x[3]) > 1e-14 else np.full(3, np.inf)
    return out


def solve_relative_pose(
    matches: np.ndarray,
    k_a: Intrinsics,
    k_b: Intrinsics,
    ransac_iterations: int = 1000,
    inlier_px: float = 1.0,
    seed: int = 0,
) -> Pose:
    """Relative pose of camera b in camera a's frame, translation unit-norm.

    `matches` is (N, 2, 2): per correspondence, the pixel in camera a
    then the pixel in camera b.  Runs the normalized 8-point algorithm
    inside RANSAC (Sampson inlier test at `inlier_px`), refits on the
    inlier set, and picks the essential-matrix decomposition that
    places the most points in front of both cameras.

    Raises InsufficientDataError for < 8 matches and
    DegenerateConfigurationError when no decomposition passes the
    cheirality test or the pair has no usable parallax.
    """
    matches = np.asarray(matches, dtype=np.float64)
    if matches.ndim != 3 or matches.shape[1:] != (2, 2):
        raise ValueError(f"matches must be (N, 2, 2), got {matches.shape}")
    n = len(matches)
    if n < 8:
        raise InsufficientDataError(f"need >= 8 correspondences, got {n}")

    pa = matches[:, 0]
    pb = matches[:, 1]
    ka = k_a.K
    kb = k_b.K
    inv_ka = np.linalg.inv(ka)
    inv_kb = np.linalg.inv(kb)
    xa = (np.column_stack([pa, np.ones(n)]) @ inv_ka.T)[:, :2]
    xb = (np.column_stack([pb, np.ones(n)]) @ inv_kb.T)[:, :2]

    # Zero-baseline guard: without parallax the correspondences coincide
    # in normalized coordinates and the essential matrix is undefined.
    if np.median(np.linalg.norm(xa - xb, axis=1)) < 1e-9:
        raise DegenerateConfigurationError("no parallax between the two cameras")

    rng = np.random.default_rng(seed)
    thresh_sq = inlier_px**2
    best_inliers: np.ndarray | None = None
    best_count = 0
    needed = ransac_iterations
    it = 0
    while it < min(needed, ransac_iterations):
        it += 1
        pick = rng.choice(n, size=8, replace=False)
        try:
            e = _eight_point(xa[pick], xb[pick])
        except np.linalg.LinAlgError:
            continue
        d = _sampson_px(e, pa, pb, ka, kb)
        inliers = d < thresh_sq
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            w = count / n
            if w >= 1.0 - 1e-12:
                break
            denom = np.log(max(1.0 - w**8, 1e-12))
            needed = int(np.ceil(np.log(1e-3) / denom)) if denom < 0 else ransac_iterations
            needed = max(needed, 20)
    if best_inliers is None or best_count < 8:
        raise DegenerateConfigurationError(
            f"RANSAC found only {best_count} inliers out of {n}"
        )

    e = _eight_point(xa[best_inliers], xb[best_inliers])

    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w_mat = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for r in (u @ w_mat @ vt, u @ w_mat.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            candidates.append((r, t))

    xa_in = xa[best_inliers]
    xb_in = xb[best_inliers]
    sub = slice(0, min(50, len(xa_in)))
    best = None
    best_front = -1
    for r, t in candidates:
        pts = _triangulate_pair_normalized(r, t, xa_in[sub], xb_in[sub])
        za = pts[:, 2]
        zb = (pts @ r.T + t)[:, 2]
        front = int(np.sum((za > 0) & (zb > 0) & np.isfinite(za) & np.isfinite(zb)))
        if front > best_front:
            best_front = front
            best = (r, t)
    if best is None or best_front == 0:
        raise DegenerateConfigurationError("all essential decompositions fail cheirality")

    r, t = best
    # [R|t] maps a-frame points to b-frame; the pose of b in a's frame
    # is the inverse transform.
    r_ab = r.T
    t_ab = -r.T @ t
    t_ab = t_ab / np.linalg.norm(t_ab)
    return Pose.from_matrix(r_ab, t_ab)


def triangulate(observations: list[tuple[Camera, np.ndarray]]) -> np.ndarray:
    """World point minimizing the algebraic (DLT) two-view-or-more error.

    Each observation is (camera, pixel).  Raises
    DegenerateConfigurationError when all viewing rays are parallel
    within tolerance (no intersection) or the solution lands at
    infinity, and InsufficientDataError for fewer than two views.
    """
    if len(observations) < 2:
        raise InsufficientDataError("triangulation needs at least two observations")

    rays = []
    rows = []
    for cam, px in observations:
        px = np.asarray(px, dtype=np.float64).reshape(2)
        k = cam.intrinsics.K
        r_wc = cam.pose.R.T
        t_wc = -r_wc @ cam.pose.t
        p = k @ np.hstack([r_wc, t_wc.reshape(3, 1)])
        rows.append(px[0] * p[2] - p[0])
        rows.append(px[1] * p[2] - p[1])
        d = cam.pose.R @ np.linalg.inv(k) @ np.array([px[0], px[1], 1.0])
        rays.append(d / np.linalg.norm(d))

    rays_arr = np.stack(rays)
    cosangles = np.clip(rays_arr @ rays_arr.T, -1.0, 1.0)
    iu = np.triu_indices(len(rays), k=1)
    max_angle = float(np.max(np.arccos(cosangles[iu])))
    if max_angle < 1e-8:
        raise DegenerateConfigurationError(
            f"viewing rays are parallel within {max_angle:.2e} rad"
        )

    a = np.stack(rows)
    _, _, vt = np.linalg.svd(a)
    x = vt[-1]
    if abs(x[3]) < 1e-12 * np.linalg.norm(x[:3]):
        raise DegenerateConfigurationError("triangulated point at infinity")
    return x[:3] / x[3]


def reprojection_residuals(
    point: np.ndarray, observations: list[tuple[Camera, np.ndarray]]
) -> np.ndarray:
    """Per-observation pixel distances between projections and detections."""
    res = []
    for cam, px in observations:
        pred, _ = project_many(cam, point.reshape(1, 3))
        res.append(float(np.linalg.norm(pred[0] - np.asarray(px, dtype=np.float64))))
    return np.array(res)


class _BundleProblem:
    """Reprojection least squares over non-reference extrinsics and points.

    Parameter vector: for each non-reference camera, a 6-vector
    (rotation tangent, translation delta) applied as R <- R exp([w]x),
    t <- t + dt; then 3 coordinates per point.  Rotation tangents live
    in the camera's local frame, which keeps the Jacobian blocks simple.
    """

    def __init__(
        self,
        rig: CameraRig,
        points: dict,
        obs_entries: list[tuple[str, tuple, np.ndarray]],
        reference: str,
    ):
        self.cam_ids = list(rig.ids)
        self.reference = reference
        self.free_cams = [c for c in self.cam_ids if c != reference]
        self.point_keys = sorted(points.keys())
        self.base_poses = {c: rig[c].pose for c in self.cam_ids}
        self.intrinsics = {c: rig[c].intrinsics for c in self.cam_ids}
        self.base_points = np.stack([points[k] for k in self.point_keys])
        self.point_index = {k: i for i, k in enumerate(self.point_keys)}
        self.cam_param_index = {c: 6 * i for i, c in enumerate(self.free_cams)}
        self.n_params = 6 * len(self.free_cams) + 3 * len(self.point_keys)
        self.entries = [
            (cam, self.point_index[key], px)
            for cam, key, px in obs_entries
            if key in self.point_index
        ]
        self.n_residuals = 2 * len(self.entries)

    def unpack(self, x: np.ndarray) -> tuple[dict[str, Pose], np.ndarray]:
        poses = {self.reference: self.base_poses[self.reference]}
        for c in self.free_cams:
            o = self.cam_param_index[c]
            base = self.base_poses[c]
            r = base.R @ so3_exp(x[o : o + 3])
            poses[c] = Pose.from_matrix(r, base.t + x[o + 3 : o + 6])
        pts = self.base_points + x[6 * len(self.free_cams) :].reshape(-1, 3)
        return poses, pts

    def residuals(self, x: np.ndarray) -> np.ndarray:
        poses, pts = self.unpack(x)
        res = np.empty(self.n_residuals)
        for i, (cam, pi, px) in enumerate(self.entries):
            pose = poses[cam]
            intr = self.intrinsics[cam]
            y = pose.R.T @ (pts[pi] - pose.t)
            u = intr.fx * y[0] / y[2] + intr.cx
            v = intr.fy * y[1] / y[2] + intr.cy
            res[2 * i] = u - px[0]
            res[2 * i + 1] = v - px[1]
        return res

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        poses, pts = self.unpack(x)
        jac = np.zeros((self.n_residuals, self.n_params))
        pt_base = 6 * len(self.free_cams)
        for i, (cam, pi, px) in enumerate(self.entries):
            pose = poses[cam]
            intr = self.intrinsics[cam]
            r = pose.R
            y = r.T @ (pts[pi] - pose.t)
            jpix = np.array(
                [
                    [intr.fx / y[2], 0.0, -intr.fx * y[0] / y[2] ** 2],
                    [0.0, intr.fy / y[2], -intr.fy * y[1] / y[2] ** 2],
                ]
            )
            # y = exp(-[w]x) R0^T (X - t - dt): d y/d w = [y]x at w=0,
            # d y/d dt = -R^T, d y/d X = R^T.
            skew_y = np.array(
                [[0.0, -y[2], y[1]], [y[2], 0.0, -y[0]], [-y[1], y[0], 0.0]]
            )
            jac[2 * i : 2 * i + 2, pt_base + 3 * pi : pt_base + 3 * pi + 3] = jpix @ r.T
            if cam != self.reference:
                o = self.cam_param_index[cam]
                jac[2 * i : 2 * i + 2, o : o + 3] = jpix @ skew_y
                jac[2 * i : 2 * i + 2, o + 3 : o + 6] = -(jpix @ r.T)
        return jac


def _per_obs_errors(res: np.ndarray) -> np.ndarray:
    pairs = res.reshape(-1, 2)
    return np.linalg.norm(pairs, axis=1)


def bundle_adjust(
    rig_init: CameraRig,
    points_init: dict,
    observations: list[WandObservation],
    reference: str | None = None,
    max_iterations: int = 200,
    rel_tolerance: float = 1e-10,
    initial_damping: float = 1e-3,
    converged_threshold_px: float = 5.0,
) -> CalibrationReport:
    """Levenberg-Marquardt refinement of extrinsics and sphere tracks.

    The reference camera (default: first id in the rig) is the gauge and
    comes back bit-identical.  Damping multiplies by 10 on a rejected
    step and divides by 10 on acceptance; iteration stops on a relative
    cost decrease below `rel_tolerance` or at `max_iterations`.  A run
    that exhausts iterations with mean reprojection above
    `converged_threshold_px` is flagged `converged=False`, not an error.

    `points_init` maps (frame, label) to an initial world position;
    `observations` must be labeled.
    """
    reference = reference or rig_init.ids[0]
    if reference not in rig_init:
        raise ValueError(f"reference camera {reference!r} not in rig")

    obs_entries = []
    for ob in observations:
        if ob.labels is None:
            raise ValueError("bundle_adjust requires labeled observations")
        if ob.camera not in rig_init:
            continue
        for c, lab in zip(ob.centroids, ob.labels):
            obs_entries.append((ob.camera, (ob.frame, lab), c))

    problem = _BundleProblem(rig_init, points_init, obs_entries, reference)
    if problem.n_residuals < problem.n_params:
        raise InsufficientDataError(
            f"{problem.n_residuals} residuals cannot constrain {problem.n_params} parameters"
        )

    x = np.zeros(problem.n_params)
    res = problem.residuals(x)
    cost = float(res @ res)
    lam = initial_damping
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        jac = problem.jacobian(x)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        diag = np.maximum(np.diag(jtj), 1e-12)
        accepted = False
        while lam < 1e12:
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + delta
            res_new = problem.residuals(x_new)
            cost_new = float(res_new @ res_new)
            if cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        x = x_new
        improvement = (cost - cost_new) / max(cost, 1e-300)
        res = res_new
        cost = cost_new
        lam = max(lam / 10.0, 1e-15)
        if improvement < rel_tolerance:
            break

    poses, pts = problem.unpack(x)
    cams = [
        Camera(rig_init[c].intrinsics, poses[c], c) for c in problem.cam_ids
    ]
    rig = CameraRig(cams)
    errors = _per_obs_errors(res)
    mean_err = float(errors.mean()) if len(errors) else 0.0
    max_err = float(errors.max()) if len(errors) else 0.0

    hists = {}
    for idx, (cam, _, _) in enumerate(problem.entries):
        hists.setdefault(cam, []).append(errors[idx])
    hist_out = {}
    hi = max(1.0, max_err)
    for cam, errs in hists.items():
        counts, edges = np.histogram(np.array(errs), bins=10, range=(0.0, hi))
        hist_out[cam] = {"counts": counts, "edges": edges}

    converged = not (
        iterations >= max_iterations and mean_err > converged_threshold_px
    )
    if not converged:
        logger.warning(
            "bundle adjustment hit %d iterations with mean error %.3f px",
            max_iterations,
            mean_err,
        )
    points_out = {k: pts[i].copy() for i, k in enumerate(problem.point_keys)}
    return CalibrationReport(
        rig=rig,
        mean_reprojection_px=mean_err,
        max_reprojection_px=max_err,
        per_camera_histograms=hist_out,
        converged=converged,
        iterations=iterations,
        points=points_out,
    )


def recover_scale(points: dict, spec: WandSpec) -> float:
    """Metric scale from known sphere spacings.

    `points` maps (frame, label) to reconstructed positions.  Returns the
    median over frames and sphere pairs of known/reconstructed distance.
    Requires at least one frame with all three spheres present.
    """
    frames: dict[int, dict[str, np.ndarray]] = {}
    for (frame, label), p in points.items():
        frames.setdefault(frame, {})[label] = np.asarray(p, dtype=np.float64)
    ratios = []
    any_complete = False
    for labeled in frames.values():
        if len(labeled) == 3:
            any_complete = True
        for a, b in itertools.combinations(sorted(labeled), 2):
            d = np.linalg.norm(labeled[a] - labeled[b])
            if d > 1e-12:
                ratios.append(spec.distance(a, b) / d)
    if not any_complete or not ratios:
        raise InsufficientDataError("no frame with all three spheres reconstructed")
    return float(np.median(ratios))


def apply_scale(rig: CameraRig, points: dict, scale: float) -> tuple[CameraRig, dict]:
    """Scale camera centers and points; reprojections are unchanged."""
    cams = [
        Camera(rig[c].intrinsics, Pose(rig[c].pose.q, rig[c].pose.t * scale), c)
        for c in rig.ids
    ]
    pts = {k: np.asarray(v) * scale for k, v in points.items()}
    return CameraRig(cams), pts


def _pair_correspondences(
    labeled: list[WandObservation], cam_a: str, cam_b: str
) -> tuple[np.ndarray, list[tuple[int, str]]]:
    """Matched pixel pairs between two cameras from labeled wand frames."""
    by_frame: dict[int, dict[str, WandObservation]] = {}
    for ob in labeled:
        by_frame.setdefault(ob.frame, {})[ob.camera] = ob
    matches = []
    keys = []
    for frame in sorted(by_frame):
        row = by_frame[frame]
        if cam_a in row and cam_b in row:
            oa, ob_ = row[cam_a], row[cam_b]
            pos_a = {lab: c for c, lab in zip(oa.centroids, oa.labels)}
            pos_b = {lab: c for c, lab in zip(ob_.centroids, ob_.labels)}
            for lab in SPHERE_LABELS:
                matches.append((pos_a[lab], pos_b[lab]))
                keys.append((frame, lab))
    if not matches:
        return np.zeros((0, 2, 2)), []
    return np.stack([np.stack(m) for m in matches]), keys


def _edge_metric_scale(
    pose_ab: Pose,
    intr_a: Intrinsics,
    intr_b: Intrinsics,
    matches: np.ndarray,
    keys: list[tuple[int, str]],
    spec: WandSpec,
) -> float:
    """Median known/reconstructed wand distance for one camera pair."""
    cam_a = Camera(intr_a, Pose.identity(), "a")
    cam_b = Camera(intr_b, pose_ab, "b")
    frames: dict[int, dict[str, np.ndarray]] = {}
    for (frame, lab), m in zip(keys, matches):
        try:
            p = triangulate([(cam_a, m[0]), (cam_b, m[1])])
        except CalibrationError:
            continue
        frames.setdefault(frame, {})[lab] = p
    ratios = []
    for labeled in frames.values():
        for a, b in itertools.combinations(sorted(labeled), 2):
            d = np.linalg.norm(labeled[a] - labeled[b])
            if d > 1e-12:
                ratios.append(spec.distance(a, b) / d)
    if not ratios:
        raise InsufficientDataError("no triangulated wand pairs for edge scaling")
    return float(np.median(ratios))


def calibrate_rig(
    observations: list[WandObservation],
    spec: WandSpec,
    intrinsics: dict[str, Intrinsics],
    seed: int = 0,
    reference: str | None = None,
) -> CalibrationReport:
    """Full wand calibration: labels to metric rig.

    Labels every observation (ambiguous frames are skipped with a log
    line), solves pairwise relative poses, chains them over the
    maximum-correspondence spanning tree rooted at the reference camera,
    pre-scales each edge with the wand geometry, triangulates sphere
    tracks, bundle-adjusts, and recovers global metric scale.

    The observations define which cameras get calibrated; `intrinsics`
    may contain entries for other cameras (they are ignored).
    """
    cam_ids = sorted({ob.camera for ob in observations})
    if not cam_ids:
        raise InsufficientDataError("no wand observations given")
    missing = [c for c in cam_ids if c not in intrinsics]
    if missing:
        raise ValueError(f"cameras {missing} have observations but no intrinsics")
    unused = sorted(set(intrinsics) - set(cam_ids))
    if unused:
        logger.info("intrinsics for %s carry no wand observations; skipped", unused)
    reference = reference or cam_ids[0]
    if reference not in cam_ids:
        raise ValueError(f"reference camera {reference!r} has no wand observations")

    labeled: list[WandObservation] = []
    skipped = 0
    for ob in observations:
        if ob.labels is not None:
            labeled.append(ob)
            continue
        try:
            labeled.append(label_spheres(ob, spec))
        except AmbiguityError:
            skipped += 1
    if skipped:
        logger.info("labeling skipped %d ambiguous observations", skipped)
    if not labeled:
        raise InsufficientDataError("no usable wand observations after labeling")

    pair_data = {}
    for a, b in itertools.combinations(cam_ids, 2):
        matches, keys = _pair_correspondences(labeled, a, b)
        if len(matches) >= 8:
            pair_data[(a, b)] = (matches, keys)

    # Maximum-correspondence spanning tree (Prim) from the reference.
    in_tree = {reference}
    edges: list[tuple[str, str]] = []
    while len(in_tree) < len(cam_ids):
        best = None
        for (a, b), (matches, _) in sorted(pair_data.items()):
            if (a in in_tree) == (b in in_tree):
                continue
            if best is None or len(matches) > len(pair_data[best][0]):
                best = (a, b)
        if best is None:
            missing = sorted(set(cam_ids) - in_tree)
            raise InsufficientDataError(
                f"cameras {missing} share too few wand frames with the rig"
            )
        edges.append(best)
        in_tree.update(best)

    poses: dict[str, Pose] = {reference: Pose.identity()}
    for a, b in edges:
        matches, keys = pair_data[(a, b)]
        known, new = (a, b) if a in poses else (b, a)
        if known == a:
            rel = solve_relative_pose(matches, intrinsics[a], intrinsics[b], seed=seed)
            scale = _edge_metric_scale(rel, intrinsics[a], intrinsics[b], matches, keys, spec)
        else:
            swapped = matches[:, ::-1]
            rel = solve_relative_pose(swapped, intrinsics[b], intrinsics[a], seed=seed)
            scale = _edge_metric_scale(rel, intrinsics[b], intrinsics[a], swapped, keys, spec)
        rel = Pose(rel.q, rel.t * scale)
        base = poses[known]
        poses[new] = Pose.from_matrix(base.R @ rel.R, base.R @ rel.t + base.t)

    rig = CameraRig([Camera(intrinsics[c], poses[c], c) for c in cam_ids])

    by_key: dict[tuple, list[tuple[Camera, np.ndarray]]] = {}
    for ob in labeled:
        for c, lab in zip(ob.centroids, ob.labels):
            by_key.setdefault((ob.frame, lab), []).append((rig[ob.camera], c))
    points_init = {}
    for key, obs_list in sorted(by_key.items()):
        if len(obs_list) < 2:
            continue
        try:
            points_init[key] = triangulate(obs_list)
        except CalibrationError:
            continue
    if not points_init:
        raise InsufficientDataError("no sphere track could be triangulated")

    report = bundle_adjust(rig, points_init, labeled, reference=reference)
    scale = recover_scale(report.points, spec)
    scaled_rig, scaled_points = apply_scale(report.rig, report.points, scale)
    return CalibrationReport(
        rig=scaled_rig,
        mean_reprojection_px=report.mean_reprojection_px,
        max_reprojection_px=report.max_reprojection_px,
        per_camera_histograms=report.per_camera_histograms,
        scale_factor=scale,
        converged=report.converged,
        iterations=report.iterations,
        points=scaled_points,
    )


# ---------------------------------------------------------------------------
# Wand observation JSON-lines ingestion: one record per (frame, camera)
# with a three-entry centroid list and optional labels.
# ---------------------------------------------------------------------------


def save_wand_observations(observations: list[WandObservation], path: str | Path) -> None:
    with open(path, "w") as f:
        for ob in observations:
            rec = {
                "frame": ob.frame,
                "camera": ob.camera,
                "centroids": [[float(u), float(v)] for u, v in ob.centroids],
            }
            if ob.labels is not None:
                rec["labels"] = list(ob.labels)
            f.write(json.dumps(rec) + "\n")


def load_wand_observations(path: str | Path) -> list[WandObservation]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{ln}: invalid JSON: {exc}") from exc
        labels = tuple(rec["labels"]) if "labels" in rec else None
        out.append(
            WandObservation(
                frame=int(rec["frame"]),
                camera=str(rec["camera"]),
                centroids=np.asarray(rec["centroids"], dtype=np.float64),
                labels=labels,
            )
        )
    return out


def save_report(report: CalibrationReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
