"""Pre-sampling along rays and the multi-view consistency score.

For every pre-sample on a ray we project the point into every other view,
read the colour and distilled features there, and compare them with the
features of the pixel that spawned the ray.  The two kinds of similarity are
normalised separately over all (pre-sample, view) pairs of the ray, and a
pair counts as consistent when both normalised similarities exceed ``delta``.
The score of a pre-sample is the consistent fraction of the views it projects
into.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import bilinear
from .geometry import Ray, project_points, sphere_intersections

DEFAULT_DELTA = 0.4
DEFAULT_GAMMA = 1.05
INT64_MAX = 2**63 - 1


@dataclass
class PreSampleSet:
    depths: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 1 or self.depths.size < 2:
            raise ValueError("need at least 2 pre-samples")
        if np.any(np.diff(self.depths) <= 0):
            raise ValueError("pre-sample depths must be strictly increasing")

    @property
    def M(self) -> int:
        return self.depths.size


@dataclass
class ConsistencyProfile:
    depths: np.ndarray
    scores: np.ndarray
    visible_counts: np.ndarray
    ref_color: Optional[np.ndarray] = None
    ref_distilled: Optional[np.ndarray] = None


def unit_ball_exit(origins: np.ndarray, dirs: np.ndarray, t_near, t_far) -> np.ndarray:
    """Default uniform cutoff: where the ray leaves the unit ball.

    Rays that miss the ball use their point of closest approach to the origin.
    The result is clamped into ``[t_near + (t_far - t_near)/4, t_far]``.
    """
    _, t1 = sphere_intersections(origins, dirs, (0.0, 0.0, 0.0), 1.0)
    closest = -np.sum(origins * dirs, axis=-1)
    t = np.where(np.isnan(t1), closest, t1)
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    lo = t_near + 0.25 * (t_far - t_near)
    return np.clip(t, lo, t_far)


def pre_sample_depths(t_near, t_cut, t_far, M: int, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Vectorised pre-sampling for a batch of rays.

    Each ray gets ``K`` equally spaced depths on ``[t_near, t_cut]`` followed by
    ``M - K`` depths whose gaps grow by ``gamma`` per step, the first tail gap
    being ``gamma`` times the uniform step.  ``K`` is the largest count whose
    geometric tail still reaches ``t_far``; the tail is then scaled by the
    factor in ``(0, 1]`` that lands its last depth exactly on ``t_far``.
    """
    if M < 2:
        raise ValueError("pre-sampling needs M >= 2")
    if gamma <= 1:
        raise ValueError("growth ratio must exceed 1")
    t_near, t_cut, t_far = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64)
                                                for a in (t_near, t_cut, t_far)))
    if np.any(t_cut <= t_near) or np.any(t_cut > t_far):
        raise ValueError("need t_near < t_cut <= t_far")
    flat = [a.reshape(-1) for a in (t_near, t_cut, t_far)]
    tn, tc, tf = flat
    R = tn.size
    geo = np.concatenate([[0.0], np.cumsum(gamma ** np.arange(1, M))])  # geo[n] = sum_{k=1}^n gamma^k
    K = np.zeros(R, dtype=np.int64)
    for k in range(2, M + 1):
        h = (tc - tn) / (k - 1)
        end = tc + h * geo[M - k]
        ok = end >= tf * (1 - 1e-12)
        K = np.where(ok, k, K)
    if np.any(K == 0):
        raise ValueError(f"M={M} pre-samples with growth {gamma} cannot span the ray interval")
    h = (tc - tn) / (K - 1)
    n_tail = M - K
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n_tail > 0, (tf - tc) / (h * geo[n_tail]), 1.0)
    idx = np.arange(M)
    uniform = tn[:, None] + h[:, None] * idx[None, :]
    tail_step = np.clip(idx[None, :] - (K[:, None] - 1), 0, M - 1)
    tail = tc[:, None] + (scale * h)[:, None] * geo[tail_step]
    out = np.where(idx[None, :] < K[:, None], uniform, tail)
    out[:, -1] = np.where(n_tail > 0, tf, out[:, -1])
    return out.reshape(*t_near.shape, M)


def pre_sample(ray: Ray, M: int, uniform_cutoff: Optional[float] = None,
               gamma: float = DEFAULT_GAMMA) -> PreSampleSet:
    """Pre-samples for one ray (cutoff defaults to :func:`unit_ball_exit`)."""
    if uniform_cutoff is None:
        uniform_cutoff = float(unit_ball_exit(ray.origin, ray.direction, ray.t_near, ray.t_far))
    return PreSampleSet(pre_sample_depths(ray.t_near, uniform_cutoff, ray.t_far, M, gamma))


def _gather_measures(points: np.ndarray, views: Sequence, view_ids: Sequence[int],
                     ref_c: np.ndarray, ref_d: np.ndarray):
    """Colour distances and distilled cosines of ``points`` (R, M, 3) in each view.

    Returns ``(dist_c, cos_d, visible)`` of shape (R, M, len(view_ids)).
    """
    R, M = points.shape[:2]
    J = len(view_ids)
    dist_c = np.zeros((R, M, J))
    cos_d = np.zeros((R, M, J))
    visible = np.zeros((R, M, J), dtype=bool)
    ref_dn = ref_d / np.maximum(np.linalg.norm(ref_d, axis=-1, keepdims=True), 1e-12)
    for jj, j in enumerate(view_ids):
        view = views[j]
        uv, _, vis = project_points(view.intrinsics, view.pose, points)
        visible[..., jj] = vis
        if not vis.any():
            continue
        r_idx, m_idx = np.nonzero(vis)
        u, v = uv[r_idx, m_idx, 0], uv[r_idx, m_idx, 1]
        fc = view.feature_maps["color"].sample(u, v)
        fd = view.feature_maps["distilled"].sample(u, v)
        dist_c[r_idx, m_idx, jj] = np.sqrt(np.sum((fc - ref_c[r_idx]) ** 2, axis=-1))
        fd_norm = np.maximum(np.sqrt(np.sum(fd * fd, axis=-1)), 1e-12)
        cos_d[r_idx, m_idx, jj] = np.sum(fd * ref_dn[r_idx], axis=-1) / fd_norm
    return dist_c, cos_d, visible


def _masked_zscore(m: np.ndarray, mask: np.ndarray, center: bool) -> np.ndarray:
    """Per-ray :func:`normalize_measures` over the masked entries of (R, M, J)."""
    n = np.maximum(mask.sum(axis=(1, 2)), 1)[:, None, None]
    x = np.where(mask, m, 0.0)
    if center:
        x = np.where(mask, x - x.sum(axis=(1, 2), keepdims=True) / n, 0.0)
    sigma = np.sqrt(np.sum(x * x, axis=(1, 2), keepdims=True) / n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sigma > 0, x / sigma, 0.0)


def scores_from_measures(dist_c: np.ndarray, cos_d: np.ndarray, visible: np.ndarray,
                         delta: float = DEFAULT_DELTA, center: bool = True):
    """Per-ray joint normalisation and thresholding.

    Arrays are (R, M, J).  Returns ``(scores, counts)`` of shape (R, M).
    """
    mc = _masked_zscore(dist_c, visible, center)
    md = _masked_zscore(cos_d, visible, center)
    # colour distances are negated so that larger means more similar
    consistent = visible & (-mc > delta) & (md > delta)
    counts = visible.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(counts > 0, consistent.sum(axis=-1) / np.maximum(counts, 1), 0.0)
    return scores, counts


def reference_features(view, u, v):
    """Ground-truth colour and distilled feature of ``view`` at pixel ``(u, v)``."""
    ref_c = bilinear(view.image.astype(np.float64), np.asarray(u, float), np.asarray(v, float))
    ref_d = view.feature_maps["distilled"].sample(u, v)
    return ref_c, np.asarray(ref_d, dtype=np.float64)


def vc_score(point, views: Sequence, ref_color, ref_distilled, delta: float = DEFAULT_DELTA,
             center: bool = True):
    """Consistency score of a single point against ``views``.

    ``views`` must already exclude the source view.  Measures are normalised
    over this point's visible views only.  Returns ``(s, |V|)``.
    """
    pts = np.asarray(point, dtype=np.float64).reshape(1, 1, 3)
    dc, cd, vis = _gather_measures(pts, views, range(len(views)),
                                   np.asarray(ref_color, float).reshape(1, -1),
                                   np.asarray(ref_distilled, float).reshape(1, -1))
    s, n = scores_from_measures(dc, cd, vis, delta, center)
    return float(s[0, 0]), int(n[0, 0])


def profile_rays(origins: np.ndarray, dirs: np.ndarray, t_near, t_far, source: np.ndarray,
                 ref_color: np.ndarray, ref_distilled: np.ndarray, views: Sequence, M: int,
                 delta: float = DEFAULT_DELTA, gamma: float = DEFAULT_GAMMA,
                 cutoff=None, center: bool = True):
    """Batched consistency profiles.

    Returns ``(depths, scores, counts)`` each of shape (R, M).  Ray ``r`` never
    counts its own view ``source[r]``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = origins.shape[0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (R,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (R,))
    if cutoff is None:
        cutoff = unit_ball_exit(origins, dirs, t_near, t_far)
    depths = pre_sample_depths(t_near, cutoff, t_far, M, gamma)
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    dc, cd, vis = _gather_measures(points, views, range(len(views)), ref_color, ref_distilled)
    source = np.asarray(source)
    vis[np.arange(R), :, source] = False
    scores, counts = scores_from_measures(dc, cd, vis, delta, center)
    return depths, scores, counts


def profile_ray(ray: Ray, views: Sequence, M: int, delta: float = DEFAULT_DELTA,
                ref_color=None, ref_distilled=None, pixel=None, gamma: float = DEFAULT_GAMMA,
                uniform_cutoff: Optional[float] = None, center: bool = True) -> ConsistencyProfile:
    """Consistency profile of one ray spawned by view ``ray.source_view``.

    Reference features are taken from the source view at ``pixel`` unless
    given explicitly.
    """
    if ray.source_view is None:
        raise ValueError("ray has no source view to exclude")
    if ref_color is None or ref_distilled is None:
        if pixel is None:
            raise ValueError("need reference features or the source pixel")
        rc, rd = reference_features(views[ray.source_view], pixel[0], pixel[1])
        ref_color = rc if ref_color is None else ref_color
        ref_distilled = rd if ref_distilled is None else ref_distilled
    ref_color = np.asarray(ref_color, float).reshape(1, -1)
    ref_distilled = np.asarray(ref_distilled, float).reshape(1, -1)
    cut = None if uniform_cutoff is None else np.array([uniform_cutoff])
    depths, scores, counts = profile_rays(ray.origin[None], ray.direction[None], ray.t_near,
                                          ray.t_far, np.array([ray.source_view]), ref_color,
                                          ref_distilled, views, M, delta, gamma, cut, center)
    return ConsistencyProfile(depths[0], scores[0], counts[0], ref_color[0], ref_distilled[0])


def memory_estimate(batch: int, M: int, N: int, C: int, bytes_per_scalar: int = 4) -> int:
    """Bytes needed to hold every projection feature of a ray batch at once."""
    dims = {"batch": batch, "M": M, "N": N, "C": C, "bytes_per_scalar": bytes_per_scalar}
    total = 1
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")
        total *= int(value)
    if total > INT64_MAX:
        raise OverflowError(f"memory estimate {total} exceeds the 64-bit byte counter")
    return total


def format_bytes(n: int) -> str:
    for unit, scale in (("TB", 10**12), ("GB", 10**9), ("MB", 10**6), ("kB", 10**3)):
        if n >= scale:
            return f"{n / scale:.1f} {unit}"
    return f"{n} B"
