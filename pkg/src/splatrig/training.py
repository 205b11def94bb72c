"""Scene optimization: image loss, analytic gradients, Adam, schedule.

The loss balances mean absolute error against a structural-dissimilarity
term and adds a mean-opacity penalty that keeps transparency
well-conditioned.  Training runs two stages: a warm-up on the captured
views alone, then refinement on the union of captured and augmented
views, with the Gaussian count held constant throughout.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import expit

from .splats import GaussianScene, RenderSettings, rasterize, rasterize_backward
from .views import PosedView, ViewSet

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries a diagnostic snapshot.

    Attributes:
        step: the step at which divergence was detected.
        snapshot: dict of parameter arrays at the moment of failure.
        history: loss-curve rows accumulated so far.
    """

    def __init__(self, step: int, snapshot: dict, history: list):
        super().__init__(f"training diverged at step {step}: loss is not finite")
        self.step = step
        self.snapshot = snapshot
        self.history = history


def _gaussian_window(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _windowed(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid-region Gaussian-weighted local means, per channel."""
    r = len(w) // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    if r == 0:
        return out
    return out[r:-r, r:-r]


def _windowed_adjoint(m: np.ndarray, w: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_windowed`: scatter valid-grid values back."""
    r = len(w) // 2
    full = np.zeros(shape)
    if r == 0:
        full[:] = m
    else:
        full[r:-r, r:-r] = m
    full = correlate1d(full, w, axis=0, mode="constant")
    full = correlate1d(full, w, axis=1, mode="constant")
    return full


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise ValueError(f"expected 2D or 3D image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with Gaussian-weighted local windows.

    Uses only windows fully inside the image, an 11-tap Gaussian of
    sigma 1.5, and stabilizers C1=0.01^2, C2=0.03^2.  Color images are
    averaged over channels.  Symmetric in its arguments.

    Raises ValueError when the images differ in shape or are smaller
    than the window in either dimension.
    """
    value, _ = _ssim_value_and_grad(a, b, window, sigma, need_grad=False)
    return value


def _ssim_value_and_grad(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    need_grad: bool = True,
) -> tuple[float, np.ndarray | None]:
    """Mean SSIM and its exact gradient with respect to `a`."""
    a3 = _as_channels(a)
    b3 = _as_channels(b)
    if a3.shape != b3.shape:
        raise ValueError(f"image shapes differ: {a3.shape} vs {b3.shape}")
    h, wdt = a3.shape[:2]
    if h < window or wdt < window:
        raise ValueError(f"image {h}x{wdt} smaller than SSIM window {window}")

    w = _gaussian_window(window, sigma)
    m_a = _windowed(a3, w)
    m_b = _windowed(b3, w)
    m_aa = _windowed(a3 * a3, w)
    m_bb = _windowed(b3 * b3, w)
    m_ab = _windowed(a3 * b3, w)

    var_a = m_aa - m_a * m_a
    var_b = m_bb - m_b * m_b
    cov = m_ab - m_a * m_b

    a1 = 2.0 * m_a * m_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = m_a * m_a + m_b * m_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2

    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not need_grad:
        return value, None

    n = smap.size
    # Partials of S with respect to the raw windowed moments of `a`.
    d_ma = (2.0 * m_b * (a2 - a1)) / (b1 * b2) - 2.0 * m_a * smap * (1.0 / b1 - 1.0 / b2)
    d_maa = -smap / b2
    d_mab = 2.0 * a1 / (b1 * b2)

    shape = a3.shape
    g = _windowed_adjoint(d_ma, w, shape)
    g += 2.0 * a3 * _windowed_adjoint(d_maa, w, shape)
    g += b3 * _windowed_adjoint(d_mab, w, shape)
    g /= n
    if np.asarray(a).ndim == 2:
        g = g[:, :, 0]
    return value, g


@dataclass
class LossParts:
    """One loss evaluation broken into its terms, with the image gradient."""

    total: float
    l1: float
    dssim: float
    opacity: float
    image_grad: np.ndarray


def loss_parts(
    rendered: np.ndarray,
    target: np.ndarray,
    alpha_dssim: float = 0.2,
    lambda_opacity: float = 0.2,
    opacity_logits: np.ndarray | None = None,
    ssim_window: int = 11,
) -> LossParts:
    """Full training loss with the exact gradient w.r.t. the rendered image.

    L = (1 - alpha_dssim) * mean|r - t|
      + alpha_dssim * (1 - SSIM(r, t)) / 2
      + lambda_opacity * mean(sigmoid(opacity_logits))

    The structural window shrinks to fit images smaller than 11 pixels
    (kept odd), so tiny images still evaluate.  The returned gradient
    covers the photometric terms; the opacity term's parameter gradient
    is :func:`opacity_regularizer_gradient`.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")

    h, wdt = rendered.shape[:2]
    eff_window = min(ssim_window, h, wdt)
    if eff_window % 2 == 0:
        eff_window -= 1

    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    d_l1 = np.sign(diff) / diff.size

    ssim_val, d_ssim = _ssim_value_and_grad(rendered, target, eff_window)
    dssim = (1.0 - ssim_val) / 2.0

    opacity_term = 0.0
    if opacity_logits is not None and lambda_opacity != 0.0:
        opacity_term = float(lambda_opacity * expit(opacity_logits).mean())

    total = (1.0 - alpha_dssim) * l1 + alpha_dssim * dssim + opacity_term
    grad = (1.0 - alpha_dssim) * d_l1 - (alpha_dssim / 2.0) * d_ssim
    return LossParts(total=total, l1=l1, dssim=dssim, opacity=opacity_term, image_grad=grad)


def loss(
    rendered: np.ndarray,
    target: np.ndarray,
    alpha_dssim: float = 0.2,
    lambda_opacity: float = 0.2,
    opacity_logits: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Scalar training loss and its gradient w.r.t. the rendered image."""
    parts = loss_parts(rendered, target, alpha_dssim, lambda_opacity, opacity_logits)
    return parts.total, parts.image_grad


def opacity_regularizer_gradient(
    opacity_logits: np.ndarray, lambda_opacity: float
) -> np.ndarray:
    """d/d_logit of lambda * mean(sigmoid(logits)): lambda*s*(1-s)/N."""
    s = expit(opacity_logits)
    return lambda_opacity * s * (1.0 - s) / len(opacity_logits)


# Relative step sizes per parameter family.  `TrainConfig.lr` drives the
# position updates directly; the other families train at fixed multiples
# of it, mirroring the usual splatting-optimizer ratios where appearance
# parameters move orders of magnitude faster than positions.
LR_SCALE = {
    "positions": 1.0,
    "log_scales": 31.25,
    "rotations": 6.25,
    "opacity_logits": 312.5,
    "colors": 15.625,
}

# Feasible-set bounds applied after every optimizer step.  Colors are
# linear RGB in [0, 1] by the scene contract; the scale and opacity
# bounds keep a few bad gradients from blowing a splat up to building
# size (which also wrecks tile-culling performance) or saturating a
# logit so far that it can never recover.
LOG_SCALE_MIN = math.log(1e-5)
LOG_SCALE_MAX = math.log(0.2)
OPACITY_LOGIT_BOUND = 12.0


@dataclass
class TrainConfig:
    """Optimization hyperparameters and the two-stage schedule."""

    alpha_dssim: float = 0.2
    lambda_opacity: float = 0.2
    lr: float = 1.6e-4
    warmup_steps: int = 500
    refine_steps: int = 1500
    random_background: bool = True
    densify: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha_dssim <= 1.0:
            raise ValueError("alpha_dssim must lie in [0, 1]")
        if self.lambda_opacity < 0:
            raise ValueError("lambda_opacity must be >= 0")
        if self.warmup_steps < 0 or self.refine_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.densify:
            logger.warning("densification is not supported and stays off")
            self.densify = False

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)

    @staticmethod
    def from_json(path: str | Path) -> "TrainConfig":
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Plain Adam over a dict of named parameter arrays.

    `lr` is either a single learning rate applied to every array or a
    mapping from parameter name to its own rate.
    """

    def __init__(
        self,
        lr: float | dict[str, float],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _rate(self, name: str) -> float:
        if isinstance(self.lr, dict):
            return self.lr[name]
        return self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= self._rate(name) * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    scene: GaussianScene
    curve: list  # rows of (step, l1, dssim, opacity, total)
    augmented_used: int = 0


def save_loss_curve(curve: Sequence, path: str | Path) -> None:
    """Write the loss history as CSV: step, l1, dssim, opacity, total."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "l1", "dssim", "opacity", "total"])
        for row in curve:
            wr.writerow([row[0]] + [f"{x:.10g}" for x in row[1:]])


def train(
    scene: GaussianScene,
    captured_views: ViewSet | Iterable[PosedView],
    aug_provider: Callable[[GaussianScene], Iterable[PosedView]] | None,
    config: TrainConfig,
) -> TrainResult:
    """Two-stage optimization of a Gaussian scene.

    Stage one runs `warmup_steps` over the captured views alone.  The
    augmented-view provider is then called once with the warm-trained
    scene, and stage two runs `refine_steps` over the union.  Views
    cycle round-robin with a seeded shuffle per epoch; when enabled, a
    fresh uniform random background is drawn every step so unsupported
    regions cannot hide behind a fixed backdrop.  After each step the
    parameters are projected back into their feasible ranges (colors in
    [0, 1], bounded scales and opacity logits).  The Gaussian count
    never changes.

    Raises TrainingDivergedError (with a parameter snapshot attached)
    the moment the loss stops being finite.
    """
    if not isinstance(captured_views, ViewSet):
        captured_views = ViewSet(list(captured_views))
    if len(captured_views) == 0:
        raise ValueError("training requires at least one captured view")
    captured_views.assert_no_holdout()

    rng = np.random.default_rng(config.seed)
    params = {
        "positions": scene.positions.copy(),
        "log_scales": scene.log_scales.copy(),
        "rotations": scene.rotations.copy(),
        "opacity_logits": scene.opacity_logits.copy(),
        "colors": scene.colors.copy(),
    }
    n_gauss = len(scene)
    opt = Adam(lr={name: config.lr * LR_SCALE[name] for name in PARAM_NAMES})
    curve: list = []

    def current_scene() -> GaussianScene:
        return GaussianScene(
            positions=params["positions"],
            log_scales=params["log_scales"],
            rotations=params["rotations"],
            opacity_logits=params["opacity_logits"],
            colors=params["colors"],
            timestamp=scene.timestamp,
        )

    def run_stage(views: list[PosedView], steps: int, step_base: int) -> None:
        order: list[int] = []
        for step in range(steps):
            if not order:
                order = list(rng.permutation(len(views)))
            view = views[order.pop(0)]
            if config.random_background:
                bg = rng.uniform(0.0, 1.0, 3)
            else:
                bg = np.zeros(3)
            settings = RenderSettings(background=bg)
            live = current_scene()
            assert len(live) == n_gauss
            out = rasterize(live, view.camera, settings, record=True)
            parts = loss_parts(
                out.color,
                view.image,
                config.alpha_dssim,
                config.lambda_opacity,
                params["opacity_logits"],
            )
            if not np.isfinite(parts.total):
                raise TrainingDivergedError(
                    step_base + step,
                    {k: v.copy() for k, v in params.items()},
                    curve,
                )
            grads = rasterize_backward(live, out.ctx, parts.image_grad)
            grads["opacity_logits"] = grads["opacity_logits"] + opacity_regularizer_gradient(
                params["opacity_logits"], config.lambda_opacity
            )
            opt.step(params, grads)
            np.clip(params["colors"], 0.0, 1.0, out=params["colors"])
            np.clip(params["log_scales"], LOG_SCALE_MIN, LOG_SCALE_MAX, out=params["log_scales"])
            np.clip(
                params["opacity_logits"],
                -OPACITY_LOGIT_BOUND,
                OPACITY_LOGIT_BOUND,
                out=params["opacity_logits"],
            )
            curve.append((step_base + step, parts.l1, parts.dssim, parts.opacity, parts.total))

    captured = list(captured_views)
    run_stage(captured, config.warmup_steps, 0)

    augmented: list[PosedView] = []
    if config.refine_steps > 0:
        if aug_provider is not None:
            augmented = list(aug_provider(current_scene()))
            ViewSet(augmented).assert_no_holdout()
        run_stage(captured + augmented, config.refine_steps, config.warmup_steps)

    logger.info(
        "training finished: %d+%d steps, %d captured + %d augmented views",
        config.warmup_steps,
        config.refine_steps,
        len(captured),
        len(augmented),
    )
    return TrainResult(scene=current_scene(), curve=curve, augmented_used=len(augmented))
