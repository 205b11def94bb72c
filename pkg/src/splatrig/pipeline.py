"""Dataset manifests, validated configuration, and the staged pipeline.

One call runs capture data through calibration (or a stored rig),
depth, cloud fusion, scene initialization, two-stage training with
augmented views, and export.  Every stage is wall-clock logged and
failures surface as :class:`StageError` with the stage name and a
machine-readable code, so the command line can map them to exit codes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .augment import AugmentConfig, Refiner, build_augmented_set
from .calibration import WandSpec, calibrate_rig, load_wand_observations
from .evaluation import MetricReport, score_views
from .geometry import Camera, CameraRig, Pose, compose, load_rig
from .images import load_png
from .splats import (
    GaussianScene,
    RenderSettings,
    drop_grazing,
    init_from_cloud,
    rasterize,
    save_scene,
)
from .stereo import (
    DepthMap,
    FusedPointCloud,
    block_match,
    disparity_to_depth,
    fuse,
    load_depth,
    remove_outliers,
    voxel_downsample,
)
from .training import TrainConfig, save_loss_curve, train
from .views import ROLE_CAPTURED, PosedView, ViewSet

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    """The dataset manifest is malformed or references missing files."""


class ConfigError(ValueError):
    """The pipeline configuration failed schema validation."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and an error code."""

    def __init__(self, stage: str, code: str, message: str):
        super().__init__(f"stage {stage!r} failed [{code}]: {message}")
        self.stage = stage
        self.code = code


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class CameraEntry:
    id: str
    pair: str
    role: str
    images: dict[int, Path]
    depths: dict[int, Path] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    """Parsed, path-resolved, existence-checked dataset description."""

    version: int
    root: Path
    rig_path: Path
    cameras: list[CameraEntry]
    timestamps: list[int]
    baseline: float | None = None
    wand_path: Path | None = None
    scene_gt: dict[int, Path] = field(default_factory=dict)

    def camera(self, cam_id: str) -> CameraEntry:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(cam_id)

    def by_role(self, role: str) -> list[CameraEntry]:
        return [c for c in self.cameras if c.role == role]

    def right_of(self, pair: str) -> CameraEntry | None:
        for c in self.cameras:
            if c.pair == pair and c.role == "right":
                return c
        return None


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from None

    root = path.parent
    missing: list[str] = []

    def resolve(rel: str) -> Path:
        p = root / rel
        if not p.is_file():
            missing.append(rel)
        return p

    try:
        version = int(raw["version"])
        timestamps = [int(t) for t in raw["timestamps"]]
        rig_path = resolve(raw["rig"])
        cameras = []
        for entry in raw["cameras"]:
            role = entry["role"]
            if role not in ("left", "right"):
                raise ManifestError(
                    f"camera {entry.get('id')}: role must be left or right, got {role!r}"
                )
            cameras.append(
                CameraEntry(
                    id=entry["id"],
                    pair=entry.get("pair", entry["id"]),
                    role=role,
                    images={int(t): resolve(p) for t, p in entry["images"].items()},
                    depths={int(t): resolve(p) for t, p in entry.get("depths", {}).items()},
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"{path}: {exc!r}") from None

    wand = resolve(raw["wand"]) if raw.get("wand") else None
    scene_gt = {int(t): resolve(p) for t, p in raw.get("scene_gt", {}).items()}
    if missing:
        raise ManifestError(
            f"{path}: {len(missing)} referenced files missing, first: {missing[0]}"
        )

    pairs: dict[str, list[str]] = {}
    for c in cameras:
        pairs.setdefault(c.pair, []).append(c.role)
    for pair, roles in pairs.items():
        if roles.count("left") != 1:
            raise ManifestError(f"stereo pair {pair!r} needs exactly one left camera")
        if roles.count("right") > 1:
            raise ManifestError(f"stereo pair {pair!r} has more than one right camera")

    for c in cameras:
        for t in timestamps:
            if t not in c.images:
                raise ManifestError(f"camera {c.id} lacks an image for timestamp {t}")

    return DatasetManifest(
        version=version,
        root=root,
        rig_path=rig_path,
        cameras=cameras,
        timestamps=timestamps,
        baseline=raw.get("baseline"),
        wand_path=wand,
        scene_gt=scene_gt,
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationConfig:
    mode: str = "load"
    seed: int = 7
    reference: str | None = None


@dataclass(frozen=True)
class FuseConfig:
    depth_source: str = "files"
    voxel: float = 0.02
    outlier_k: int = 20
    outlier_std: float = 2.0
    z_max: float = 8.0
    max_disparity: int = 64
    window: int = 9
    init_opacity: float = 0.1
    prune_grazing: bool = True


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "holdout"
    radius: float = 1.5
    views: int = 50
    height: float = 1.6


@dataclass
class PipelineConfig:
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    refiner: Refiner = field(default_factory=lambda: Refiner("hole_fill"))
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str | None = None

    def to_dict(self) -> dict:
        def plain(obj):
            return {f.name: getattr(obj, f.name) for f in dc_fields(obj)}

        return {
            "calibration": plain(self.calibration),
            "fuse": plain(self.fuse),
            "train": plain(self.train),
            "augment": plain(self.augment),
            "refiner": plain(self.refiner),
            "eval": plain(self.eval),
            "output_dir": self.output_dir,
        }


def config_schema() -> dict:
    """The published JSON schema every config is validated against."""
    text = resources.files("splatrig").joinpath("pipeline_config.schema.json").read_text()
    return json.loads(text)


def config_from_dict(raw: dict) -> PipelineConfig:
    try:
        jsonschema.validate(raw, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return PipelineConfig(
        calibration=CalibrationConfig(**raw.get("calibration", {})),
        fuse=FuseConfig(**raw.get("fuse", {})),
        train=TrainConfig(**raw.get("train", {})),
        augment=AugmentConfig(**raw.get("augment", {})),
        refiner=Refiner(**raw.get("refiner", {})) if "refiner" in raw else Refiner("hole_fill"),
        eval=EvalConfig(**raw.get("eval", {})),
        output_dir=raw.get("output_dir"),
    )


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    return config_from_dict(raw)


def config_hash(config: PipelineConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_provenance(outdir: Path, config: PipelineConfig) -> None:
    """Drop a provenance.json capturing everything needed to reproduce."""
    import numba
    import scipy

    prov = {
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "seed": config.train.seed,
        "versions": {
            "splatrig": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "provenance.json").write_text(json.dumps(prov, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# staged pipeline
# ---------------------------------------------------------------------------


class _StageClock:
    """Context manager that logs a stage's wall clock and wraps failures."""

    def __init__(self, name: str, timings: dict[str, float]):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.time()
        log.info("stage %s: start", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.time() - self.t0
        self.timings[self.name] = round(dt, 3)
        if exc is None:
            log.info("stage %s: done in %.2fs", self.name, dt)
            return False
        if isinstance(exc, StageError):
            return False
        log.error("stage %s: failed after %.2fs: %s", self.name, dt, exc)
        raise StageError(self.name, type(exc).__name__, str(exc)) from exc


@dataclass
class PreparedData:
    """Everything the training stages need, shared across variants."""

    rig: CameraRig
    left_images: dict[str, np.ndarray]
    right_images: dict[str, np.ndarray]
    cloud_full: "object"
    cloud_centroid: np.ndarray
    init_scene: GaussianScene
    timings: dict[str, float]


@dataclass
class PipelineResult:
    scene: GaussianScene
    scene_path: Path | None
    metrics: MetricReport | None
    timings: dict[str, float]
    outdir: Path | None
    augmented_used: int = 0


def _load_rig_stage(manifest: DatasetManifest, config: PipelineConfig) -> CameraRig:
    rig = load_rig(manifest.rig_path)
    for entry in manifest.cameras:
        if entry.id not in rig:
            raise ManifestError(f"camera {entry.id} missing from rig file")
    if config.calibration.mode == "load":
        return rig

    if manifest.wand_path is None:
        raise ManifestError("calibration mode 'wand' needs a wand file in the manifest")
    obs = load_wand_observations(manifest.wand_path)
    obs_cams = {o.camera for o in obs}
    intrinsics = {c.id: c.intrinsics for c in rig if c.id in obs_cams}
    spec = _wand_spec_from_obs(manifest)
    report = calibrate_rig(
        obs,
        spec,
        intrinsics,
        seed=config.calibration.seed,
        reference=config.calibration.reference,
    )
    # Calibration fixes the wand-observing (left) cameras; each right
    # camera rides along its pair's left pose at the stereo baseline.
    if manifest.baseline is None:
        raise ManifestError("manifest lacks the stereo baseline needed for right poses")
    offset = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([manifest.baseline, 0.0, 0.0]))
    cams: list[Camera] = []
    for entry in manifest.cameras:
        intr = rig[entry.id].intrinsics
        if entry.role == "left":
            cams.append(Camera(intr, report.rig[entry.id].pose, id=entry.id))
        else:
            left_entry = next(
                c for c in manifest.cameras if c.pair == entry.pair and c.role == "left"
            )
            pose = compose(report.rig[left_entry.id].pose, offset)
            cams.append(Camera(intr, pose, id=entry.id))
    return CameraRig(cams)


def _wand_spec_from_obs(manifest: DatasetManifest) -> WandSpec:
    """Wand geometry travels with the dataset when present, else default."""
    meta = manifest.root / "wand_spec.json"
    if meta.is_file():
        raw = json.loads(meta.read_text())
        return WandSpec(raw["d_ab"], raw["d_bc"], raw["d_ac"])
    return WandSpec(0.2, 0.4, 0.6)


def _depth_stage(
    manifest: DatasetManifest,
    config: PipelineConfig,
    rig: CameraRig,
    left_images: dict[str, np.ndarray],
    right_images_by_pair: dict[str, np.ndarray],
    timestamp: int,
) -> list[DepthMap]:
    maps = []
    for entry in manifest.by_role("left"):
        if config.fuse.depth_source == "files":
            if timestamp not in entry.depths:
                raise ManifestError(
                    f"camera {entry.id} has no depth file for timestamp {timestamp} "
                    f"(set fuse.depth_source to 'block_match' to compute it)"
                )
            maps.append(load_depth(entry.depths[timestamp], camera=entry.id, frame=timestamp))
            continue
        if entry.pair not in right_images_by_pair:
            raise ManifestError(
                f"stereo pair {entry.pair} has no right image; block matching needs both"
            )
        if manifest.baseline is None:
            raise ManifestError("manifest lacks the stereo baseline for block matching")
        disp = block_match(
            left_images[entry.id],
            right_images_by_pair[entry.pair],
            max_disparity=config.fuse.max_disparity,
            window=config.fuse.window,
        )
        cam = rig[entry.id]
        maps.append(
            disparity_to_depth(
                disp,
                cam.intrinsics.fx,
                manifest.baseline,
                camera=entry.id,
                frame=timestamp,
                z_max=config.fuse.z_max,
            )
        )
    return maps


def prepare(
    manifest: DatasetManifest | str | Path,
    config: PipelineConfig | None = None,
    timestamp: int = 0,
    timings: dict[str, float] | None = None,
) -> PreparedData:
    """Run the data stages (rig, depth, fuse, init) for one timestamp."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    config = config or PipelineConfig()
    timings = {} if timings is None else timings
    if timestamp not in manifest.timestamps:
        raise ManifestError(
            f"timestamp {timestamp} not in manifest (has {manifest.timestamps})"
        )

    with _StageClock("calibrate", timings):
        rig = _load_rig_stage(manifest, config)

    with _StageClock("load_images", timings):
        left_images = {
            e.id: load_png(e.images[timestamp]) for e in manifest.by_role("left")
        }
        right_images = {
            e.id: load_png(e.images[timestamp]) for e in manifest.by_role("right")
        }
        right_by_pair = {
            e.pair: right_images[e.id] for e in manifest.by_role("right")
        }

    with _StageClock("depth", timings):
        depth_maps = _depth_stage(
            manifest, config, rig, left_images, right_by_pair, timestamp
        )

    with _StageClock("fuse", timings):
        cloud_full = fuse(depth_maps, left_images, rig)
        if len(cloud_full) == 0:
            raise StageError("fuse", "EmptyCloud", "no valid depth pixels to fuse")
        centroid = cloud_full.positions.mean(axis=0)

    with _StageClock("init", timings):
        cloud = voxel_downsample(cloud_full, config.fuse.voxel)
        cloud = remove_outliers(cloud, k=config.fuse.outlier_k, std_ratio=config.fuse.outlier_std)
        scene = init_from_cloud(
            cloud, initial_opacity=config.fuse.init_opacity, timestamp=timestamp
        )
        if config.fuse.prune_grazing:
            scene = drop_grazing(scene, rig)

    return PreparedData(
        rig=rig,
        left_images=left_images,
        right_images=right_images,
        cloud_full=cloud_full,
        cloud_centroid=centroid,
        init_scene=scene,
        timings=timings,
    )


def _captured_views(prep: PreparedData, manifest: DatasetManifest) -> ViewSet:
    views = [
        PosedView(prep.rig[e.id], prep.left_images[e.id], ROLE_CAPTURED, e.id)
        for e in manifest.by_role("left")
    ]
    return ViewSet(views)


def _aug_provider(prep, manifest, config):
    if config.augment.n_per_camera == 0:
        return None
    left_ids = [e.id for e in manifest.by_role("left")]
    sub_rig = CameraRig([prep.rig[cid] for cid in left_ids])

    def provider(scene: GaussianScene):
        return build_augmented_set(
            scene,
            sub_rig,
            config.augment,
            config.refiner,
            scene_center=prep.cloud_centroid,
            references=prep.left_images,
        )

    return provider


def _holdout_report(
    scene: GaussianScene, prep: PreparedData, runtime_s: float
) -> MetricReport | None:
    if not prep.right_images:
        return None
    settings = RenderSettings()
    pairs = {}
    for cam_id, target in sorted(prep.right_images.items()):
        rendered = rasterize(scene, prep.rig[cam_id], settings).color
        pairs[cam_id] = (rendered, target)
    return score_views(pairs, runtime_s=runtime_s)


def run_pipeline(
    manifest: DatasetManifest | str | Path,
    config: PipelineConfig | None = None,
    timestamp: int = 0,
    outdir: str | Path | None = None,
) -> PipelineResult:
    """Capture-to-scene for one timestamp; see the module docstring.

    Writes scene_t{timestamp}.egsp, loss_curve.csv, metrics.json and
    provenance.json into the output directory (config.output_dir unless
    overridden).  Given identical inputs and seeds the scene bytes are
    identical across runs.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    config = config or PipelineConfig()
    timings: dict[str, float] = {}

    prep = prepare(manifest, config, timestamp, timings)

    with _StageClock("train", timings):
        result = train(
            prep.init_scene,
            _captured_views(prep, manifest),
            _aug_provider(prep, manifest, config),
            config.train,
        )

    t0 = time.time()
    metrics = _holdout_report(result.scene, prep, 0.0)
    eval_s = time.time() - t0
    if metrics is not None:
        metrics.runtime_s = round(eval_s, 3)
        metrics.fps = len(prep.right_images) / eval_s if eval_s > 0 else 0.0
    timings["evaluate"] = round(eval_s, 3)

    out = Path(outdir) if outdir is not None else (
        Path(config.output_dir) if config.output_dir else None
    )
    scene_path = None
    if out is not None:
        with _StageClock("export", timings):
            out.mkdir(parents=True, exist_ok=True)
            scene_path = out / f"scene_t{timestamp:04d}.egsp"
            save_scene(result.scene, scene_path)
            save_loss_curve(result.curve, out / "loss_curve.csv")
            if metrics is not None:
                (out / "metrics.json").write_text(
                    json.dumps(metrics.to_dict(), indent=2) + "\n"
                )
            (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
            write_provenance(out, config)

    log.info("pipeline timings: %s", timings)
    return PipelineResult(
        scene=result.scene,
        scene_path=scene_path,
        metrics=metrics,
        timings=timings,
        outdir=out,
        augmented_used=result.augmented_used,
    )


# ---------------------------------------------------------------------------
# comparison variants
# ---------------------------------------------------------------------------


def _random_init_scene(
    prep: PreparedData, config: PipelineConfig, timestamp: int
) -> GaussianScene:
    """Initialization that ignores the fused geometry on purpose.

    Positions are drawn uniformly inside the fused cloud's bounding box
    and colors uniformly in [0, 1]; the count matches the cloud-derived
    scene so comparisons isolate placement, not capacity.  Scales and
    opacity follow the same seeding rules as the cloud path.
    """
    rng = np.random.default_rng(config.train.seed)
    n = len(prep.init_scene)
    lo = prep.cloud_full.positions.min(axis=0)
    hi = prep.cloud_full.positions.max(axis=0)
    cloud = FusedPointCloud(
        positions=rng.uniform(lo, hi, size=(n, 3)),
        colors=rng.uniform(0.0, 1.0, size=(n, 3)),
        source_camera=np.zeros(n, dtype=np.int64),
        source_pixel=np.zeros((n, 2), dtype=np.int64),
        camera_ids=list(prep.cloud_full.camera_ids),
    )
    return init_from_cloud(
        cloud, initial_opacity=config.fuse.init_opacity, timestamp=timestamp
    )


def run_variant(
    dataset_dir: str | Path,
    config: PipelineConfig | None,
    variant: str,
    timestamp: int = 0,
    prep: PreparedData | None = None,
) -> MetricReport:
    """Train and score one comparison variant on the holdout views.

    depth_reprojection: the fused cloud splatted straight into the
    holdout views, no training at all.  baseline_3dgs: splats started
    at random positions (fused geometry ignored) and trained on the
    captured views only.  no_augment: the cloud-initialized scene
    trained on the captured views only, with no augmented views.
    full: the whole pipeline as configured.  Pass a PreparedData to
    reuse the shared data stages across variants.
    """
    from dataclasses import replace

    from .evaluation import depth_reprojection_render

    manifest = load_manifest(dataset_dir)
    config = config or PipelineConfig()
    if prep is None:
        prep = prepare(manifest, config, timestamp)
    if not prep.right_images:
        raise ManifestError("variant comparison needs right-role holdout images")

    t0 = time.time()
    if variant == "depth_reprojection":
        pairs = {}
        for cam_id, target in sorted(prep.right_images.items()):
            rendered = depth_reprojection_render(prep.cloud_full, prep.rig[cam_id])
            pairs[cam_id] = (rendered, target)
        return score_views(pairs, runtime_s=time.time() - t0)

    init_scene = prep.init_scene
    if variant == "baseline_3dgs":
        cfg = replace(config, augment=replace(config.augment, n_per_camera=0))
        init_scene = _random_init_scene(prep, config, timestamp)
    elif variant == "no_augment":
        cfg = replace(config, augment=replace(config.augment, n_per_camera=0))
    elif variant == "full":
        cfg = config
    else:
        raise ValueError(f"unknown variant {variant!r}")

    result = train(
        init_scene,
        _captured_views(prep, manifest),
        _aug_provider(prep, manifest, cfg),
        cfg.train,
    )
    report = _holdout_report(result.scene, prep, time.time() - t0)
    assert report is not None
    return report


# ---------------------------------------------------------------------------
# replay bundles
# ---------------------------------------------------------------------------


def export_replay(
    scene_paths: dict[int, str | Path],
    trajectory_path: str | Path,
    outdir: str | Path,
    rig_path: str | Path | None = None,
    prebake: bool = False,
) -> Path:
    """Assemble a viewer bundle: scenes, trajectory, index.json.

    `scene_paths` maps timestamp to an EGSP file.  The trajectory is a
    JSON list of {q, t, time} records, each optionally carrying a
    "timestamp" key (default 0) that must name an available scene.
    With `prebake`, every trajectory pose is also rendered to
    frames/frame_%04d.png using the first rig camera's intrinsics.
    """
    from .geometry import Intrinsics, load_rig as _load_rig
    from .images import save_png
    from .splats import load_scene

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)

    records = json.loads(Path(trajectory_path).read_text())
    if not isinstance(records, list) or not records:
        raise ValueError(f"{trajectory_path}: expected a non-empty JSON list of poses")
    needed = {int(rec.get("timestamp", 0)) for rec in records}
    have = set(scene_paths)
    if not needed <= have:
        missing = sorted(needed - have)
        raise ValueError(f"trajectory needs scene timestamp(s) {missing} not exported")

    scenes_meta = []
    for t in sorted(scene_paths):
        src = Path(scene_paths[t])
        data = src.read_bytes()
        name = f"scene_t{t:04d}.egsp"
        (out / name).write_bytes(data)
        scenes_meta.append({"timestamp": t, "file": name})

    (out / "trajectory.json").write_text(json.dumps(records, indent=2) + "\n")

    index = {
        "version": 1,
        "generator": f"splatrig {__version__}",
        "scenes": scenes_meta,
        "trajectory": "trajectory.json",
    }

    if rig_path is not None:
        rig_data = Path(rig_path).read_text()
        (out / "rig.json").write_text(rig_data)
        index["rig"] = "rig.json"

    if prebake:
        if rig_path is None:
            raise ValueError("prebaking needs a rig file for intrinsics")
        rig = _load_rig(rig_path)
        intr: Intrinsics = next(iter(rig)).intrinsics
        frames_dir = out / "frames"
        frames_dir.mkdir(exist_ok=True)
        scenes_by_t = {t: load_scene(scene_paths[t]) for t in sorted(scene_paths)}
        frame_names = []
        settings = RenderSettings()
        for i, rec in enumerate(records):
            pose = Pose(np.asarray(rec["q"], dtype=np.float64),
                        np.asarray(rec["t"], dtype=np.float64))
            cam = Camera(intr, pose, id=f"traj{i:04d}")
            scene = scenes_by_t[int(rec.get("timestamp", 0))]
            img = rasterize(scene, cam, settings).color
            name = f"frames/frame_{i:04d}.png"
            save_png(img, out / name)
            frame_names.append(name)
        index["frames"] = frame_names

    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return out
