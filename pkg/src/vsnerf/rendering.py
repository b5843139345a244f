"""Alpha-compositing quadrature of the volume rendering integral.

For samples ``t_1 < ... < t_S`` with gaps ``delta_i = t_{i+1} - t_i`` (the
last gap repeats the previous one) the weights are

    w_i = T_i (1 - exp(-sigma_i delta_i)),   T_i = prod_{j<i} exp(-sigma_j delta_j)

and a ray renders to ``C = sum w_i c_i`` with expected depth ``d = sum w_i t_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

T_MIN = 1e-30


@dataclass
class RenderResult:
    color: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    accumulation: np.ndarray
    deltas: np.ndarray


def sample_deltas(t: np.ndarray) -> np.ndarray:
    """Gaps between consecutive samples, repeating the last gap."""
    t = np.asarray(t)
    if t.shape[-1] < 2:
        raise ValueError("gaps need at least two samples; pass deltas explicitly")
    d = np.diff(t, axis=-1)
    return np.concatenate([d, d[..., -1:]], axis=-1)


def render_rays(t: np.ndarray, sigma: np.ndarray, rgb: np.ndarray,
                deltas: Optional[np.ndarray] = None) -> RenderResult:
    """Composite a batch: ``t``/``sigma`` are (..., S) and ``rgb`` is (..., S, 3)."""
    t = np.asarray(t)
    sigma = np.asarray(sigma)
    rgb = np.asarray(rgb)
    if sigma.shape != t.shape or rgb.shape != t.shape + (3,):
        raise ValueError(f"shape mismatch: t {t.shape}, sigma {sigma.shape}, rgb {rgb.shape}")
    if t.shape[-1] < 1:
        raise ValueError("need at least one sample")
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if deltas is None:
        deltas = sample_deltas(t)
    deltas = np.asarray(deltas, dtype=sigma.dtype)
    decay = np.exp(-sigma * deltas)
    trans = np.ones_like(decay)
    if t.shape[-1] > 1:
        trans[..., 1:] = np.cumprod(decay[..., :-1], axis=-1)
    trans = np.maximum(trans, T_MIN)
    w = trans * (1.0 - decay)
    color = np.einsum("...s,...sc->...c", w, rgb)
    depth = np.sum(w * t, axis=-1)
    return RenderResult(color, depth, w, trans, w.sum(axis=-1), deltas)


def render_ray(samples, field_outputs, deltas=None) -> RenderResult:
    """Single-ray convenience wrapper.

    ``samples`` is a sample set (or plain depth array); ``field_outputs`` is
    ``(sigma, rgb)`` with shapes (S,) and (S, 3).
    """
    t = np.asarray(getattr(samples, "depths", samples), dtype=np.float64)
    sigma, rgb = field_outputs
    return render_rays(t, np.asarray(sigma, dtype=np.float64), np.asarray(rgb, dtype=np.float64),
                       deltas)


def render_backward(result: RenderResult, t: np.ndarray, rgb: np.ndarray,
                    d_color: np.ndarray, d_depth: np.ndarray):
    """Adjoints of ``(sigma, rgb)`` given adjoints of the rendered colour and depth.

    Shapes follow :func:`render_rays`; ``d_color`` is (..., 3), ``d_depth`` (...).
    """
    w, T, dl = result.weights, result.transmittance, result.deltas
    d_color = np.asarray(d_color, dtype=w.dtype)
    d_depth = np.asarray(d_depth, dtype=w.dtype)
    if d_color.shape != w.shape[:-1] + (3,) or d_depth.shape != w.shape[:-1]:
        raise ValueError("adjoint shapes do not match the rendered batch")
    d_rgb = w[..., None] * d_color[..., None, :]
    gw = np.einsum("...sc,...c->...s", rgb, d_color) + t * d_depth[..., None]
    wg = w * gw
    # sum_{i>k} w_i gw_i
    after = np.cumsum(wg[..., ::-1], axis=-1)[..., ::-1] - wg
    # dw_k/dsigma_k = delta_k T_k exp(-sigma_k delta_k) = delta_k (T_k - w_k)
    d_sigma = dl * ((T - w) * gw - after)
    return d_sigma, d_rgb


def render_ray_with_grads(samples, field_outputs, d_color, d_depth, deltas=None):
    """Forward render plus adjoints of every ``sigma_i`` and ``c_i``."""
    t = np.asarray(getattr(samples, "depths", samples), dtype=np.float64)
    sigma, rgb = field_outputs
    rgb = np.asarray(rgb, dtype=np.float64)
    res = render_ray(t, (sigma, rgb), deltas)
    return res, render_backward(res, t, rgb, d_color, d_depth)
