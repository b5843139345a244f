"""Ray sample placement: inverse-transform PDF sampling and naive baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consistency import ConsistencyProfile
from .geometry import Ray

DEFAULT_FLOOR = 0.01


@dataclass
class BinWeights:
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.edges.shape[-1] < 2 or self.weights.shape[-1] != self.edges.shape[-1] - 1:
            raise ValueError("need M >= 2 edges and M - 1 weights")
        if np.any(np.diff(self.edges, axis=-1) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("bin weights must be finite and non-negative")


@dataclass
class SampleSet:
    depths: np.ndarray

    @property
    def S(self) -> int:
        return self.depths.shape[-1]


def bin_weights_from_scores(scores: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Mean of the two endpoint scores per bin, plus ``floor``; works on (..., M)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] < 2:
        raise ValueError("need at least 2 scores")
    return 0.5 * (scores[..., 1:] + scores[..., :-1]) + floor


def bins_from_profile(profile: ConsistencyProfile, floor: float = DEFAULT_FLOOR) -> BinWeights:
    return BinWeights(profile.depths, bin_weights_from_scores(profile.scores, floor))


def pdf_sample_batch(edges: np.ndarray, weights: np.ndarray, S: int,
                     rng: np.random.Generator, stratified: bool = True) -> np.ndarray:
    """Inverse-transform sampling of piecewise-constant densities, one row per ray.

    ``edges`` is (R, M) and ``weights`` (R, M-1); bin ``i`` receives
    probability mass ``weights[i] / sum(weights)`` spread uniformly over its
    interval.  With ``stratified`` each of the ``S`` equal quantile strata gets
    one uniform variate.  Output (R, S) is sorted per row.
    """
    if S < 1:
        raise ValueError("need S >= 1")
    edges = np.atleast_2d(np.asarray(edges, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    total = weights.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("every ray needs at least one positive bin weight")
    R = edges.shape[0]
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(weights / total, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if stratified:
        u = (np.arange(S) + rng.random((R, S))) / S
    else:
        u = np.sort(rng.random((R, S)), axis=-1)
    # first bin whose upper cdf exceeds u; zero-mass bins are never selected
    idx = np.empty((R, S), dtype=np.int64)
    for r in range(R):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, weights.shape[-1] - 1)
    lo_c = np.take_along_axis(cdf, idx, -1)
    hi_c = np.take_along_axis(cdf, idx + 1, -1)
    lo_e = np.take_along_axis(edges, idx, -1)
    hi_e = np.take_along_axis(edges, idx + 1, -1)
    frac = np.clip((u - lo_c) / np.maximum(hi_c - lo_c, 1e-300), 0.0, 1.0)
    out = lo_e + frac * (hi_e - lo_e)
    return np.sort(out, axis=-1)


def pdf_sample(bins: BinWeights, S: int, rng: np.random.Generator) -> SampleSet:
    """Stratified inverse-transform samples from one ray's bin weights."""
    return SampleSet(pdf_sample_batch(bins.edges[None], bins.weights[None], S, rng)[0])


def uniform_depths(t_near, t_far, S: int) -> np.ndarray:
    """Equally spaced depths including both ends; works on arrays of rays."""
    if S < 2:
        raise ValueError("need S >= 2")
    t_near = np.asarray(t_near, dtype=np.float64)[..., None]
    t_far = np.asarray(t_far, dtype=np.float64)[..., None]
    return t_near + (t_far - t_near) * np.linspace(0.0, 1.0, S)


def stratified_depths(t_near, t_far, S: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform variate in each of ``S`` equal strata of ``[t_near, t_far)``."""
    if S < 2:
        raise ValueError("need S >= 2")
    t_near = np.asarray(t_near, dtype=np.float64)[..., None]
    t_far = np.asarray(t_far, dtype=np.float64)[..., None]
    u = (np.arange(S) + rng.random(t_near.shape[:-1] + (S,))) / S
    return t_near + (t_far - t_near) * u


def uniform_sample(ray: Ray, S: int) -> SampleSet:
    return SampleSet(uniform_depths(ray.t_near, ray.t_far, S))


def stratified_sample(ray: Ray, S: int, rng: np.random.Generator) -> SampleSet:
    return SampleSet(stratified_depths(ray.t_near, ray.t_far, S, rng))
