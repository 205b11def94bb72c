"""Unit tests for SSIM, the training loss, Adam, and the two-stage loop."""

from __future__ import annotations

import numpy as np
import pytest

from splatrig.geometry import Camera, Intrinsics, Pose
from splatrig.raster import warm_up
from splatrig.splats import GaussianScene, rasterize
from splatrig.training import (
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    OPACITY_LOGIT_BOUND,
    Adam,
    TrainConfig,
    TrainingDivergedError,
    _ssim_value_and_grad,
    loss_parts,
    opacity_regularizer_gradient,
    save_loss_curve,
    ssim,
    train,
)
from splatrig.views import ROLE_AUGMENTED, ROLE_HOLDOUT, LeakageError, PosedView


@pytest.fixture(scope="module", autouse=True)
def compiled_kernels():
    warm_up()


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def test_ssim_identity_is_exactly_one():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16, 3))
    assert ssim(img, img) == 1.0


def test_ssim_constant_images_hand_value():
    # Constant images have zero variance everywhere, so every window gives
    # (2*c1*c2 + C1) / (c1^2 + c2^2 + C1); the C2 factors cancel.
    a = np.full((16, 16), 0.3)
    b = np.full((16, 16), 0.7)
    expected = (2 * 0.3 * 0.7 + 1e-4) / (0.3**2 + 0.7**2 + 1e-4)
    assert np.isclose(ssim(a, b), expected, rtol=0, atol=1e-12)


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 20, 3))
    b = rng.uniform(size=(20, 20, 3))
    assert np.isclose(ssim(a, b), ssim(b, a), atol=1e-14)


def test_ssim_orders_by_corruption():
    rng = np.random.default_rng(3)
    base = rng.uniform(size=(24, 24))
    mild = np.clip(base + rng.normal(scale=0.02, size=base.shape), 0, 1)
    harsh = np.clip(base + rng.normal(scale=0.2, size=base.shape), 0, 1)
    assert ssim(base, harsh) < ssim(base, mild) < 1.0


def test_ssim_validates_inputs():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # smaller than the window


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(13, 13))
    b = rng.uniform(size=(13, 13))
    _, grad = _ssim_value_and_grad(a, b)
    h = 1e-6
    for v, u in [(0, 0), (6, 6), (12, 3), (2, 11)]:
        ap = a.copy()
        ap[v, u] += h
        up = ssim(ap, b)
        ap[v, u] -= 2 * h
        dn = ssim(ap, b)
        fd = (up - dn) / (2 * h)
        assert np.isclose(grad[v, u], fd, rtol=1e-4, atol=1e-8)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def test_loss_parts_perfect_prediction():
    img = np.random.default_rng(5).uniform(size=(16, 16, 3))
    logits = np.array([0.0, 0.0])
    parts = loss_parts(img, img, 0.2, 0.2, logits)
    assert parts.l1 == 0.0
    assert parts.dssim == 0.0
    # Only the opacity term remains: 0.2 * mean(sigmoid(0)) = 0.1.
    assert np.isclose(parts.opacity, 0.1)
    assert np.isclose(parts.total, 0.1)


def test_loss_parts_l1_hand_value():
    pred = np.full((12, 12, 3), 0.25)
    target = np.full((12, 12, 3), 0.75)
    parts = loss_parts(pred, target, alpha_dssim=0.0, lambda_opacity=0.0)
    assert np.isclose(parts.l1, 0.5)
    assert np.isclose(parts.total, 0.5)
    # Gradient of mean|d| where pred < target: -1/N everywhere.
    assert np.allclose(parts.image_grad, -1.0 / pred.size)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    pred = rng.uniform(0.2, 0.8, size=(13, 13, 3))
    target = rng.uniform(size=(13, 13, 3))
    parts = loss_parts(pred, target, 0.2, 0.0)
    h = 1e-6
    for v, u, c in [(3, 4, 0), (8, 9, 2)]:
        pp = pred.copy()
        pp[v, u, c] += h
        up = loss_parts(pp, target, 0.2, 0.0).total
        pp[v, u, c] -= 2 * h
        dn = loss_parts(pp, target, 0.2, 0.0).total
        fd = (up - dn) / (2 * h)
        assert np.isclose(parts.image_grad[v, u, c], fd, rtol=1e-3, atol=1e-9)


def test_opacity_regularizer_gradient_hand_value():
    # At logit 0: lambda * 0.5 * 0.5 / N = 0.2 * 0.25 / 2 = 0.025.
    g = opacity_regularizer_gradient(np.array([0.0, 0.0]), 0.2)
    assert np.allclose(g, 0.025)


def test_loss_small_image_window_shrinks():
    img = np.random.default_rng(7).uniform(size=(5, 5, 3))
    parts = loss_parts(img, img)
    assert parts.dssim == 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_is_lr_sized():
    params = {"x": np.array([0.0])}
    opt = Adam(lr=0.01)
    opt.step(params, {"x": np.array([-3.0])})
    assert np.isclose(params["x"][0], 0.01, atol=1e-8)


def test_adam_per_name_rates():
    params = {"x": np.array([0.0]), "y": np.array([0.0])}
    opt = Adam(lr={"x": 0.01, "y": 0.5})
    opt.step(params, {"x": np.array([2.0]), "y": np.array([2.0])})
    assert np.isclose(params["x"][0], -0.01, atol=1e-8)
    assert np.isclose(params["y"][0], -0.5, atol=1e-8)


def test_adam_converges_on_quadratic():
    params = {"x": np.array([0.0])}
    opt = Adam(lr=0.05)
    for _ in range(600):
        opt.step(params, {"x": params["x"] - 3.0})
    assert abs(params["x"][0] - 3.0) < 1e-3


def test_adam_movement_bounded_by_lr_times_steps():
    # |update| <= lr / (1 - eps-ish) per step for any gradient history, the
    # property that pins how far a parameter can travel in a fixed budget.
    rng = np.random.default_rng(8)
    params = {"x": np.array([0.0])}
    opt = Adam(lr=1e-3)
    prev = 0.0
    for _ in range(200):
        opt.step(params, {"x": rng.normal(size=1) * 50.0})
        assert abs(params["x"][0] - prev) <= 1e-3 * 1.05
        prev = params["x"][0]


# ---------------------------------------------------------------------------
# train() schedule and guards
# ---------------------------------------------------------------------------


def tiny_scene(n=6, seed=9) -> GaussianScene:
    rng = np.random.default_rng(seed)
    return GaussianScene(
        positions=np.column_stack(
            [rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n), rng.uniform(1.0, 2.0, n)]
        ),
        log_scales=np.full((n, 3), np.log(0.1)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, 2.0),
        colors=rng.uniform(size=(n, 3)),
    )


def tiny_camera(cam_id="c0", x=0.0) -> Camera:
    intr = Intrinsics(fx=30.0, fy=30.0, cx=12.0, cy=12.0, width=24, height=24)
    return Camera(intrinsics=intr, pose=Pose(np.array([1.0, 0, 0, 0]), np.array([x, 0.0, 0.0])), id=cam_id)


def tiny_views(scene) -> list[PosedView]:
    views = []
    for i, x in enumerate((0.0, 0.05)):
        cam = tiny_camera(f"c{i}", x)
        img = rasterize(scene, cam).color
        views.append(PosedView(camera=cam, image=img, name=f"v{i}"))
    return views


def test_train_schedule_and_count_invariants():
    scene = tiny_scene()
    views = tiny_views(scene)
    calls = []

    def provider(warm):
        calls.append(warm.count)
        extra = PosedView(
            camera=tiny_camera("aug", 0.1),
            image=rasterize(scene, tiny_camera("aug", 0.1)).color,
            role=ROLE_AUGMENTED,
        )
        return [extra]

    cfg = TrainConfig(warmup_steps=4, refine_steps=6, seed=1)
    result = train(scene, views, provider, cfg)
    assert len(result.curve) == 10
    assert [row[0] for row in result.curve] == list(range(10))
    assert calls == [scene.count]  # provider called exactly once, after warmup
    assert result.augmented_used == 1
    assert result.scene.count == scene.count


def test_train_does_not_mutate_input_scene():
    scene = tiny_scene()
    before = scene.positions.copy()
    train(scene, tiny_views(scene), None, TrainConfig(warmup_steps=3, refine_steps=0))
    assert np.array_equal(scene.positions, before)


def test_train_rejects_holdout_in_captured():
    scene = tiny_scene()
    bad = PosedView(
        camera=tiny_camera(), image=np.zeros((24, 24, 3)), role=ROLE_HOLDOUT, name="h"
    )
    with pytest.raises(LeakageError):
        train(scene, [bad], None, TrainConfig(warmup_steps=1, refine_steps=0))


def test_train_rejects_holdout_from_provider():
    scene = tiny_scene()

    def leaky(_):
        return [
            PosedView(
                camera=tiny_camera(), image=np.zeros((24, 24, 3)), role=ROLE_HOLDOUT
            )
        ]

    with pytest.raises(LeakageError):
        train(scene, tiny_views(scene), leaky, TrainConfig(warmup_steps=1, refine_steps=1))


def test_train_deterministic_per_seed():
    scene = tiny_scene()
    views = tiny_views(scene)
    cfg = TrainConfig(warmup_steps=3, refine_steps=3, seed=7)
    a = train(scene, views, None, cfg)
    b = train(scene, views, None, cfg)
    assert np.array_equal(a.scene.positions, b.scene.positions)
    assert np.array_equal(a.scene.colors, b.scene.colors)
    assert a.curve == b.curve
    c = train(scene, views, None, TrainConfig(warmup_steps=3, refine_steps=3, seed=8))
    assert not np.array_equal(a.scene.positions, c.scene.positions)


def test_train_diverged_error_carries_snapshot():
    scene = tiny_scene()
    views = tiny_views(scene)
    poisoned = PosedView(
        camera=tiny_camera("nan_cam"),
        image=np.full((24, 24, 3), np.nan),
        role=ROLE_AUGMENTED,
    )
    with pytest.raises(TrainingDivergedError) as exc_info:
        train(scene, views, lambda _: [poisoned], TrainConfig(warmup_steps=1, refine_steps=30, seed=0))
    err = exc_info.value
    assert set(err.snapshot) == {"positions", "log_scales", "rotations", "opacity_logits", "colors"}
    assert err.step >= 1


def test_train_improves_fit_from_perturbed_colors():
    scene = tiny_scene(n=10, seed=12)
    views = tiny_views(scene)
    rng = np.random.default_rng(13)
    start = scene.copy()
    start.colors = np.clip(start.colors + rng.normal(scale=0.02, size=start.colors.shape), 0, 1)
    # With only ten splats the mean-opacity penalty is strong per splat
    # and would trade fit for transparency; zero it to isolate colors.
    cfg = TrainConfig(
        warmup_steps=150,
        refine_steps=0,
        random_background=False,
        seed=3,
        lambda_opacity=0.0,
    )
    result = train(start, views, None, cfg)
    target = views[0].image

    def mse(img):
        return float(np.mean((img - target) ** 2))

    before = mse(rasterize(start, views[0].camera).color)
    after = mse(rasterize(result.scene, views[0].camera).color)
    assert after < before * 0.5


def test_train_projects_parameters_into_bounds():
    # An absurdly large base rate makes Adam overshoot every boundary;
    # the per-step projection must keep the scene inside its contract.
    scene = tiny_scene(n=8, seed=21)
    views = tiny_views(scene)
    cfg = TrainConfig(warmup_steps=120, refine_steps=0, lr=0.05, seed=5)
    result = train(scene, views, None, cfg)
    out = result.scene
    assert out.colors.min() >= 0.0 and out.colors.max() <= 1.0
    assert out.log_scales.min() >= LOG_SCALE_MIN - 1e-12
    assert out.log_scales.max() <= LOG_SCALE_MAX + 1e-12
    assert np.abs(out.opacity_logits).max() <= OPACITY_LOGIT_BOUND + 1e-12


def test_save_loss_curve_format(tmp_path):
    curve = [(0, 0.5, 0.1, 0.02, 0.62), (1, 0.4, 0.09, 0.02, 0.51)]
    path = tmp_path / "curve.csv"
    save_loss_curve(curve, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,l1,dssim,opacity,total"
    assert lines[1].startswith("0,0.5,")
    assert len(lines) == 3
