"""Photometric and depth-pushing losses, chained back to the field parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import field as fieldmod
from .optim import AdamState, optimizer_step  # noqa: F401  (public re-export)
from .rendering import RenderResult, render_backward, render_rays

DEFAULT_LAMBDA_DEPU = 1e-4
DEFAULT_EPS = 0.01


@dataclass
class LossReport:
    color_loss: float
    depth_pushing_loss: float
    total: float
    lambda_depu: float
    eps: float
    batch_size: int


def color_loss(rendered, target) -> float:
    """Mean over rays of the squared colour error."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape or rendered.ndim != 2 or rendered.shape[0] < 1:
        raise ValueError(f"need matching (B, 3) arrays, got {rendered.shape} and {target.shape}")
    return float(np.mean(np.sum((rendered - target) ** 2, axis=1)))


def color_loss_grad(rendered, target) -> np.ndarray:
    rendered = np.asarray(rendered)
    return 2.0 * (rendered - target) / rendered.shape[0]


def depth_pushing_loss(expected_depths, eps: float = DEFAULT_EPS) -> float:
    """``-mean(log(d + eps))``: smaller when rays terminate farther away."""
    d = np.asarray(expected_depths, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if d.size < 1:
        raise ValueError("empty batch")
    if np.any(d < 0):
        raise ValueError("expected depths must be non-negative")
    return float(-np.mean(np.log(d + eps)))


def depth_pushing_grad(expected_depths, eps: float = DEFAULT_EPS) -> np.ndarray:
    d = np.asarray(expected_depths)
    return -1.0 / (d.size * (d + eps))


def total_loss_and_grads(field, origins: np.ndarray, dirs: np.ndarray, t: np.ndarray,
                         targets: np.ndarray, lambda_depu: float = DEFAULT_LAMBDA_DEPU,
                         eps: float = DEFAULT_EPS) -> Tuple[LossReport, Dict[str, np.ndarray], RenderResult]:
    """Render a ray batch, evaluate ``L_color + lambda * L_depu`` and backpropagate.

    ``t`` holds the (B, S) sample depths of each ray.  Returns the loss report,
    the parameter gradients and the render result.
    """
    B, S = t.shape
    dt = field.dtype
    xs = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    ds = np.broadcast_to(dirs[:, None, :], xs.shape)
    sigma, rgb, cache = fieldmod.forward_with_cache(field, xs, ds)
    tt = t.astype(dt)
    res = render_rays(tt, sigma, rgb)
    lc = color_loss(res.color, targets)
    ld = depth_pushing_loss(np.maximum(res.depth, 0.0), eps)
    total = lc + lambda_depu * ld
    if not math.isfinite(total):
        raise FloatingPointError(f"non-finite loss (color={lc}, depth={ld})")
    g_color = color_loss_grad(res.color, targets.astype(dt)).astype(dt)
    g_depth = (lambda_depu * depth_pushing_grad(res.depth, eps)).astype(dt) if lambda_depu \
        else np.zeros(B, dtype=dt)
    d_sigma, d_rgb = render_backward(res, tt, rgb, g_color, g_depth)
    grads = fieldmod.backward(field, cache, d_sigma, d_rgb)
    report = LossReport(lc, ld, total, lambda_depu, eps, B)
    return report, grads, res
