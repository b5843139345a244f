"""Training loop, sampler schedule and held-out evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import field as fieldmod
from .consistency import DEFAULT_DELTA, DEFAULT_GAMMA, profile_rays, reference_features
from .dataset import PosedView, enclosure_distance
from .field import FieldConfig, RadianceField, init_field
from .geometry import pixel_directions
from .metrics import psnr_from_mse, ssim
from .objectives import DEFAULT_EPS, DEFAULT_LAMBDA_DEPU, LossReport, total_loss_and_grads
from .optim import AdamState, optimizer_step
from .rendering import render_rays
from .sampling import DEFAULT_FLOOR, bin_weights_from_scores, pdf_sample_batch, stratified_depths, uniform_depths

log = logging.getLogger(__name__)

SAMPLERS = ("vs", "uniform", "stratified")


@dataclass
class TrainConfig:
    iterations: int = 3000
    vs_iterations: Optional[int] = None
    batch_size: int = 512
    presamples: int = 64
    samples: int = 24
    eval_samples: int = 64
    delta: float = DEFAULT_DELTA
    lambda_depu: float = DEFAULT_LAMBDA_DEPU
    eps: float = DEFAULT_EPS
    sampler: str = "vs"
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    floor: float = DEFAULT_FLOOR
    gamma: float = DEFAULT_GAMMA
    center_measures: bool = True
    t_near: float = 0.05
    t_far: Optional[float] = None
    seed: int = 0
    eval_interval: int = 500
    deterministic: bool = True
    dtype: str = "float32"
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)

    @property
    def vs_active_iterations(self) -> int:
        if self.sampler != "vs":
            return 0
        return self.iterations // 6 if self.vs_iterations is None else self.vs_iterations

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.vs_iterations is not None and not 0 <= self.vs_iterations <= self.iterations:
            raise ValueError("vs_iterations must lie in [0, iterations]")
        for name in ("batch_size", "presamples", "samples", "eval_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.samples < 2 or self.presamples < 2:
            raise ValueError("need at least 2 samples and 2 pre-samples per ray")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        self.field.validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Metrics:
    iteration: int
    psnr: float
    ssim: float
    color_loss: float
    depth_loss: float
    total_loss: float
    wall_ms: float


@dataclass
class TrainHistory:
    evals: List[Metrics] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    sampler: List[str] = field(default_factory=list)
    color_loss: List[float] = field(default_factory=list)
    depth_loss: List[float] = field(default_factory=list)
    total_loss: List[float] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: RadianceField, history: TrainHistory):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    source: np.ndarray
    pixels: np.ndarray
    targets: np.ndarray
    ref_color: np.ndarray
    ref_distilled: Optional[np.ndarray]


def ray_bounds(origins, dirs, t_near: float, t_far: Optional[float], enclosure_radius: Optional[float]):
    R = origins.shape[0]
    near = np.full(R, float(t_near))
    if t_far is not None:
        far = np.full(R, float(t_far))
    elif enclosure_radius is not None:
        far = enclosure_distance(enclosure_radius, origins, dirs)
    else:
        raise ValueError("need either t_far or an enclosure radius to bound rays")
    if np.any(~np.isfinite(far)) or np.any(far <= near):
        raise ValueError("rays do not have a valid [t_near, t_far] interval")
    return near, far


def sample_ray_batch(views: Sequence[PosedView], batch_size: int, rng: np.random.Generator,
                     t_near: float = 0.05, t_far: Optional[float] = None,
                     enclosure_radius: Optional[float] = None, with_features: bool = True) -> RayBatch:
    """Pixels drawn uniformly over every pixel of every view."""
    if not views:
        raise ValueError("no views to sample rays from")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    sizes = np.array([v.intrinsics.width * v.intrinsics.height for v in views])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(0, offsets[-1], batch_size)
    source = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[source]
    origins = np.empty((batch_size, 3))
    dirs = np.empty((batch_size, 3))
    pixels = np.empty((batch_size, 2))
    targets = np.empty((batch_size, 3))
    ref_d = None
    for j in np.unique(source):
        m = source == j
        v = views[j]
        W = v.intrinsics.width
        py, px = np.divmod(local[m], W)
        pixels[m] = np.stack([px, py], axis=1)
        dirs[m] = pixel_directions(v.intrinsics, v.pose, px.astype(float), py.astype(float))
        origins[m] = v.pose.translation
        targets[m] = v.image[py, px]
        if with_features and "distilled" in v.feature_maps:
            _, rd = reference_features(v, px.astype(float), py.astype(float))
            if ref_d is None:
                ref_d = np.zeros((batch_size, rd.shape[-1]))
            ref_d[m] = rd
    near, far = ray_bounds(origins, dirs, t_near, t_far, enclosure_radius)
    return RayBatch(origins, dirs, near, far, source, pixels, targets, targets.copy(), ref_d)


def sampler_for_iteration(config: TrainConfig, it: int) -> str:
    if config.sampler == "vs":
        return "vs" if it < config.vs_active_iterations else "stratified"
    return config.sampler


def sample_depths(mode: str, batch: RayBatch, views, config: TrainConfig, rng: np.random.Generator):
    S = config.samples
    if mode == "uniform":
        return uniform_depths(batch.t_near, batch.t_far, S)
    if mode == "stratified":
        return stratified_depths(batch.t_near, batch.t_far, S, rng)
    if batch.ref_distilled is None:
        raise ValueError("view-consistent sampling needs distilled feature maps")
    depths, scores, _ = profile_rays(batch.origins, batch.dirs, batch.t_near, batch.t_far,
                                     batch.source, batch.ref_color, batch.ref_distilled, views,
                                     config.presamples, config.delta, config.gamma,
                                     center=config.center_measures)
    weights = bin_weights_from_scores(scores, config.floor)
    return pdf_sample_batch(depths, weights, S, rng)


def render_view(field: RadianceField, view: PosedView, samples: int, rng: np.random.Generator,
                t_near: float = 0.05, t_far: Optional[float] = None,
                enclosure_radius: Optional[float] = None, chunk: int = 4096):
    """Render every pixel of ``view`` with the stratified sampler.

    Returns ``(image, depth)`` arrays of shape (H, W, 3) and (H, W).
    """
    K = view.intrinsics
    v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    dirs = pixel_directions(K, view.pose, u.ravel(), v.ravel())
    origins = np.broadcast_to(view.pose.translation, dirs.shape).copy()
    near, far = ray_bounds(origins, dirs, t_near, t_far, enclosure_radius)
    t_all = stratified_depths(near, far, samples, rng)
    color = np.empty((dirs.shape[0], 3))
    depth = np.empty(dirs.shape[0])
    for s in range(0, dirs.shape[0], chunk):
        sl = slice(s, s + chunk)
        t = t_all[sl]
        xs = origins[sl, None, :] + t[..., None] * dirs[sl, None, :]
        ds = np.broadcast_to(dirs[sl, None, :], xs.shape)
        sigma, rgb = fieldmod.query_batch(field, xs, ds)
        res = render_rays(t.astype(field.dtype), sigma, rgb)
        color[sl] = res.color
        depth[sl] = res.depth
    return color.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width)


def eval_metrics(field: RadianceField, views: Sequence[PosedView], samples: int = 64, seed: int = 0,
                 t_near: float = 0.05, t_far: Optional[float] = None,
                 enclosure_radius: Optional[float] = None, return_images: bool = False):
    """PSNR (of the pooled MSE) and mean SSIM over held-out views."""
    if not views:
        raise ValueError("need at least one held-out view")
    rng = np.random.default_rng(seed)
    errs, ssims, images = [], [], []
    for view in views:
        img, depth = render_view(field, view, samples, rng, t_near, t_far, enclosure_radius)
        img = np.clip(img, 0.0, 1.0)
        errs.append(np.mean((img - view.image.astype(np.float64)) ** 2))
        ssims.append(ssim(img, view.image))
        images.append((img, depth))
    out = (psnr_from_mse(float(np.mean(errs))), float(np.mean(ssims)))
    return (out + (images,)) if return_images else out


def train(views: Sequence[PosedView], config: TrainConfig, eval_views: Sequence[PosedView] = (),
          enclosure_radius: Optional[float] = None, field: Optional[RadianceField] = None,
          callback: Optional[Callable[[int, LossReport, str], None]] = None):
    """Optimise a radiance field on ``views``.

    Returns ``(field, TrainHistory)``.  Evaluation on ``eval_views`` happens
    every ``eval_interval`` iterations and after the last one.
    """
    config.validate()
    if config.sampler == "vs" and config.vs_active_iterations > 0:
        if len(views) < 2:
            raise ValueError("view-consistent sampling needs at least 2 views")
        missing = [v.name for v in views if "distilled" not in v.feature_maps
                   or "color" not in v.feature_maps]
        if missing:
            raise ValueError(f"views without color/distilled feature maps: {missing}")
    dtype = np.dtype(config.dtype)
    seq = np.random.SeedSequence(config.seed)
    init_seq, batch_seq, sample_seq = seq.spawn(3)
    if field is None:
        field = init_field(config.field, int(init_seq.generate_state(1)[0]), dtype)
    else:
        field = field.astype(dtype)
    batch_rng = np.random.default_rng(batch_seq)
    sample_rng = np.random.default_rng(sample_seq)
    state = AdamState()
    history = TrainHistory()
    start = time.perf_counter()
    window: List[LossReport] = []

    def evaluate(it: int):
        if not eval_views:
            return
        p, s = eval_metrics(field, eval_views, config.eval_samples, config.seed, config.t_near,
                            config.t_far, enclosure_radius)
        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in window])) if window else math.nan
        wall = 0.0 if config.deterministic else (time.perf_counter() - start) * 1000
        history.evals.append(Metrics(it, p, s, mean("color_loss"), mean("depth_pushing_loss"),
                                     mean("total"), wall))
        window.clear()
        log.info("iter %d  psnr %.3f  ssim %.4f", it, p, s)

    for it in range(config.iterations):
        mode = sampler_for_iteration(config, it)
        batch = sample_ray_batch(views, config.batch_size, batch_rng, config.t_near, config.t_far,
                                 enclosure_radius, with_features=(mode == "vs"))
        t = sample_depths(mode, batch, views, config, sample_rng)
        try:
            report, grads, _ = total_loss_and_grads(
                field, batch.origins.astype(dtype), batch.dirs.astype(dtype), t, batch.targets,
                config.lambda_depu, config.eps)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", field, history) from exc
        field = RadianceField(field.config, optimizer_step(
            field.params, grads, state, config.lr, config.beta1, config.beta2, config.adam_eps))
        history.iterations.append(it)
        history.sampler.append(mode)
        history.color_loss.append(report.color_loss)
        history.depth_loss.append(report.depth_pushing_loss)
        history.total_loss.append(report.total)
        window.append(report)
        if callback:
            callback(it, report, mode)
        if (it + 1) % config.eval_interval == 0 and it + 1 < config.iterations:
            evaluate(it + 1)
    evaluate(config.iterations)
    return field, history
