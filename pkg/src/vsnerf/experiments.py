"""Sampler/regulariser ablation on random synthetic scenes."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .dataset import random_scene, split_views, synth_scene
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# name -> (sampler, depth-pushing weight); None means the configured default weight
ARMS: Dict[str, tuple] = {
    "baseline": ("uniform", 0.0),
    "vs": ("vs", 0.0),
    "dl": ("uniform", None),
    "vs+dl": ("vs", None),
}


@dataclass
class AblationSetup:
    n_views: int = 12
    n_eval: int = 2
    elevation_jitter_deg: float = 10.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(samples=16, eval_interval=1000))


@dataclass
class AblationResult:
    psnr: Dict[str, List[float]]
    ssim: Dict[str, List[float]]
    seeds: List[int]
    seconds: Dict[str, List[float]]

    def mean(self, arm: str) -> float:
        return float(np.mean(self.psnr[arm]))

    def stderr(self, arm: str) -> float:
        x = np.asarray(self.psnr[arm])
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan

    def rows(self) -> List[dict]:
        return [{"arm": a, "seed": s, "psnr": self.psnr[a][i], "ssim": self.ssim[a][i],
                 "seconds": self.seconds[a][i]}
                for a in self.psnr for i, s in enumerate(self.seeds)]


def run_ablation(seeds: Sequence[int], setup: Optional[AblationSetup] = None,
                 arms: Sequence[str] = tuple(ARMS),
                 progress: Optional[Callable[[str, int, float], None]] = None) -> AblationResult:
    """Train every arm on the scene of every seed and collect held-out metrics."""
    setup = setup or AblationSetup()
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown ablation arms {sorted(unknown)}")
    res = AblationResult({a: [] for a in arms}, {a: [] for a in arms}, list(seeds),
                         {a: [] for a in arms})
    for seed in seeds:
        spec = random_scene(seed, n_views=setup.n_views,
                            elevation_jitter_deg=setup.elevation_jitter_deg)
        views, _ = synth_scene(spec, seed)
        tr, held = split_views(len(views), setup.n_eval)
        train_views = [views[i] for i in tr]
        eval_views = [views[i] for i in held]
        for arm in arms:
            sampler, lam = ARMS[arm]
            cfg = replace(setup.train, sampler=sampler, seed=seed,
                          lambda_depu=setup.train.lambda_depu if lam is None else lam)
            start = time.perf_counter()
            _, hist = train(train_views, cfg, eval_views, enclosure_radius=spec.enclosure_radius)
            elapsed = time.perf_counter() - start
            final = hist.evals[-1]
            res.psnr[arm].append(final.psnr)
            res.ssim[arm].append(final.ssim)
            res.seconds[arm].append(elapsed)
            log.info("seed %d %-8s psnr %.3f ssim %.4f (%.0fs)", seed, arm, final.psnr,
                     final.ssim, elapsed)
            if progress:
                progress(arm, seed, final.psnr)
    return res


def judge(res: AblationResult, margin: float = 0.5, slack: float = 0.1) -> dict:
    """Check the ablation ordering.

    The combined arm must beat the baseline by ``margin`` dB on average, or
    failing that, with non-overlapping one-standard-error intervals.  Each
    single component must stay within ``slack`` dB of the baseline.
    """
    base = res.mean("baseline")
    gain = res.mean("vs+dl") - base
    lo_combined = res.mean("vs+dl") - res.stderr("vs+dl")
    hi_base = base + res.stderr("baseline")
    separated = bool(gain > 0 and lo_combined > hi_base)
    singles = {a: res.mean(a) - base for a in ("vs", "dl") if a in res.psnr}
    return {
        "gain_db": gain,
        "margin_met": bool(gain >= margin),
        "stderr_separated": separated,
        "combined_ok": bool(gain >= margin or separated),
        "single_gains_db": singles,
        "singles_ok": all(g >= -slack for g in singles.values()),
    }
