"""Feature maps, similarity normalisation and the distillation projector.

The projector is a residual bottleneck block

    y = W_up relu(W_down x + b_down) + b_up + W_res x,     out = y / |y|

trained with a CLIP-style symmetric cross-entropy over the cosine-similarity
matrix of matched feature pairs.  Gradients are derived by hand.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .optim import AdamState, optimizer_step

log = logging.getLogger(__name__)

KINDS = ("color", "raw", "distilled")
METRICS = ("euclidean", "cosine")


@dataclass
class FeatureMap:
    data: np.ndarray
    kind: str = "raw"
    metric: str = "cosine"
    downscale: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise ValueError(f"feature data must be HxWxC with C >= 1, got {self.data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.kind == "color":
            if self.channels != 3 or self.metric != "euclidean":
                raise ValueError("color maps are 3-channel and euclidean")
            if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
                raise ValueError("color map values must lie in [0, 1]")
        if self.kind == "distilled" and self.metric != "cosine":
            raise ValueError("distilled maps use the cosine metric")
        if self.downscale < 1:
            raise ValueError("downscale must be a positive integer")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_map_coords(self, u, v):
        """Convert full-resolution image coordinates into this map's texel grid."""
        if self.downscale == 1:
            return u, v
        f = float(self.downscale)
        return (np.asarray(u) + 0.5) / f - 0.5, (np.asarray(v) + 0.5) / f - 0.5

    def sample(self, u, v) -> np.ndarray:
        """Bilinear lookup at image coordinates, clamping to the map's edge."""
        mu, mv = self.to_map_coords(u, v)
        mu = np.clip(mu, 0, self.width - 1)
        mv = np.clip(mv, 0, self.height - 1)
        return bilinear(self.data, mu, mv)


def bilinear(data: np.ndarray, u, v) -> np.ndarray:
    """Vectorised bilinear lookup; ``u``/``v`` must already be in range.

    Arithmetic runs in the floating dtype of ``data``.
    """
    H, W = data.shape[:2]
    flat = data.reshape(H * W, *data.shape[2:])
    dt = flat.dtype if np.issubdtype(flat.dtype, np.floating) else np.float64
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(H - 2, 0))
    du = np.minimum(u0 + 1, W - 1) - u0
    dv = (np.minimum(v0 + 1, H - 1) - v0) * W
    a = (u - u0).astype(dt)
    b = (v - v0).astype(dt)
    i00 = v0 * W + u0
    extra = (None,) * (flat.ndim - 1)
    out = np.take(flat, i00, axis=0) * ((1 - a) * (1 - b))[(...,) + extra]
    out += np.take(flat, i00 + du, axis=0) * (a * (1 - b))[(...,) + extra]
    out += np.take(flat, i00 + dv, axis=0) * ((1 - a) * b)[(...,) + extra]
    out += np.take(flat, i00 + dv + du, axis=0) * (a * b)[(...,) + extra]
    return out


def interpolate_bilinear(fmap: FeatureMap, u: float, v: float) -> np.ndarray:
    """Blend the four texels around ``(u, v)`` (map coordinates)."""
    if not (0 <= u <= fmap.width - 1 and 0 <= v <= fmap.height - 1):
        raise ValueError(f"({u}, {v}) outside {fmap.width}x{fmap.height} feature map")
    return bilinear(fmap.data.astype(np.float64), u, v)


def normalize_measures(raw, metric: str, center: bool = False) -> np.ndarray:
    """Scale similarity measures by their root mean square.

    Distances (``metric="euclidean"``) are negated afterwards so that larger
    always means more similar.  With ``center=True`` the mean is removed
    before scaling, turning the result into a z-score.  A set whose scale is
    zero maps to all zeros.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    m = np.asarray(raw, dtype=np.float64)
    if m.size == 0:
        raise ValueError("no measures to normalise")
    if center:
        m = m - m.mean()
    sigma = math.sqrt(float(np.mean(m * m)))
    if sigma == 0.0:
        return np.zeros_like(m)
    out = m / sigma
    return -out if metric == "euclidean" else out


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return an @ bn.T


def diagonal_argmax_fraction(sim: np.ndarray) -> float:
    """Fraction of rows whose maximum sits on the diagonal."""
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(sim.shape[0])))


# --------------------------------------------------------------------------
# projector

PROJECTOR_ORDER = ("w_down", "b_down", "w_up", "b_up", "w_res")


@dataclass
class BottleneckProjector:
    params: Dict[str, np.ndarray]
    tau: float = 0.07

    @property
    def c_in(self) -> int:
        return self.params["w_down"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["w_down"].shape[1]

    @property
    def c_out(self) -> int:
        return self.params["w_up"].shape[1]

    def copy(self) -> "BottleneckProjector":
        return BottleneckProjector({k: v.copy() for k, v in self.params.items()}, self.tau)


def init_projector(c_in: int, c_out: int, hidden: Optional[int] = None, seed: int = 0,
                   tau: float = 0.07, dtype=np.float64) -> BottleneckProjector:
    """He-initialised down projection, zero up projection, scaled random residual map.

    When ``c_in == c_out`` the residual path is the identity and carries no
    parameters, so a fresh projector returns the normalised input.
    """
    if c_out < 1 or c_in < c_out:
        raise ValueError(f"need 1 <= c_out <= c_in, got c_in={c_in}, c_out={c_out}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    hidden = hidden or max(c_out, c_in // 4)
    rng = np.random.default_rng(seed)
    params = {
        "w_down": rng.normal(0.0, math.sqrt(2.0 / c_in), (c_in, hidden)),
        "b_down": np.zeros(hidden),
        "w_up": np.zeros((hidden, c_out)),
        "b_up": np.zeros(c_out),
    }
    if c_in != c_out:
        params["w_res"] = rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out))
    return BottleneckProjector({k: v.astype(dtype) for k, v in params.items()}, tau)


def _project_forward(p: BottleneckProjector, x: np.ndarray):
    x = np.asarray(x, dtype=p.params["w_down"].dtype)
    if x.ndim != 2 or x.shape[1] != p.c_in:
        raise ValueError(f"expected K x {p.c_in} features, got {x.shape}")
    pre = x @ p.params["w_down"] + p.params["b_down"]
    h = np.maximum(pre, 0.0)
    y = h @ p.params["w_up"] + p.params["b_up"]
    y = y + (x @ p.params["w_res"] if "w_res" in p.params else x)
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    degenerate = norm[:, 0] < 1e-12
    out = y / np.where(degenerate[:, None], 1.0, norm)
    if degenerate.any():
        log.warning("projector produced %d zero vectors; substituting unit basis vector",
                    int(degenerate.sum()))
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    return out, (x, pre, h, y, norm, degenerate)


def apply_projector(p: BottleneckProjector, feats: np.ndarray) -> np.ndarray:
    """Project ``K x C_in`` features to unit-norm ``K x C_out`` rows."""
    return _project_forward(p, feats)[0]


def _project_backward(p: BottleneckProjector, cache, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    x, pre, h, y, norm, degenerate = cache
    out = y / np.where(degenerate[:, None], 1.0, norm)
    dy = (d_out - out * np.sum(out * d_out, axis=1, keepdims=True)) / np.where(
        degenerate[:, None], 1.0, norm)
    dy[degenerate] = 0.0
    grads = {
        "w_up": h.T @ dy,
        "b_up": dy.sum(axis=0),
    }
    dh = dy @ p.params["w_up"].T
    dpre = dh * (pre > 0)
    grads["w_down"] = x.T @ dpre
    grads["b_down"] = dpre.sum(axis=0)
    if "w_res" in p.params:
        grads["w_res"] = x.T @ dy
    return grads


@dataclass
class CorrespondenceBatch:
    feats_a: np.ndarray
    feats_b: np.ndarray

    def __post_init__(self):
        if self.feats_a.shape != self.feats_b.shape or self.feats_a.ndim != 2:
            raise ValueError(f"mismatched batch shapes {self.feats_a.shape} vs {self.feats_b.shape}")
        if self.feats_a.shape[0] < 2:
            raise ValueError("a contrastive batch needs at least 2 correspondences")


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def symmetric_ce_from_logits(logits: np.ndarray) -> Tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) for the row/column symmetric cross-entropy."""
    K = logits.shape[0]
    lr = _log_softmax(logits, axis=1)
    lc = _log_softmax(logits, axis=0)
    idx = np.arange(K)
    loss = -0.5 * (lr[idx, idx].mean() + lc[idx, idx].mean())
    eye = np.eye(K)
    dlogits = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / K
    return float(loss), dlogits


def symmetric_ce_loss(p: BottleneckProjector, batch: CorrespondenceBatch):
    """CLIP-style contrastive loss of a projector on one correspondence batch.

    Returns
    -------
    loss : float
    grads : dict
        Same keys and shapes as ``p.params``.
    """
    za, ca = _project_forward(p, batch.feats_a)
    zb, cb = _project_forward(p, batch.feats_b)
    logits = za @ zb.T / p.tau
    loss, dlogits = symmetric_ce_from_logits(logits)
    dza = dlogits @ zb / p.tau
    dzb = dlogits.T @ za / p.tau
    ga = _project_backward(p, ca, dza)
    gb = _project_backward(p, cb, dzb)
    return loss, {k: ga[k] + gb[k] for k in p.params}


# --------------------------------------------------------------------------
# synthetic correspondences and training


@dataclass
class CorrespondenceGenerator:
    """Matched high-dimensional features sharing a low-dimensional latent.

    Each correspondence draws a latent ``z`` (``latent_dim``) embedded through a
    fixed orthonormal frame; each side then adds independent nuisance of
    standard deviation ``nuisance`` in the orthogonal complement plus small
    isotropic noise.
    """

    c_in: int = 384
    latent_dim: int = 32
    nuisance: float = 1.0
    noise: float = 0.05
    seed: int = 0
    basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 1 <= self.latent_dim < self.c_in:
            raise ValueError("latent_dim must be in [1, c_in)")
        q, _ = np.linalg.qr(np.random.default_rng(self.seed).normal(size=(self.c_in, self.c_in)))
        self.basis = q

    def batch(self, k: int, rng: np.random.Generator) -> CorrespondenceBatch:
        d = self.latent_dim
        z = rng.normal(size=(k, d))

        def side():
            coeff = np.concatenate(
                [z, self.nuisance * rng.normal(size=(k, self.c_in - d))], axis=1)
            return coeff @ self.basis.T + self.noise * rng.normal(size=(k, self.c_in))

        return CorrespondenceBatch(side(), side())


@dataclass
class DistillConfig:
    c_in: int = 384
    c_out: int = 32
    hidden: int = 96
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 50
    tau: float = 0.07
    seed: int = 0


@dataclass
class DistillReport:
    steps: int
    final_loss: float
    loss_history: list
    diagonal_fraction: Optional[float] = None
    raw_diagonal_fraction: Optional[float] = None


def distill_train(pairs: Union[Iterable[CorrespondenceBatch], Callable[[int], CorrespondenceBatch]],
                  config: DistillConfig, held_out: Optional[CorrespondenceBatch] = None,
                  projector: Optional[BottleneckProjector] = None):
    """Fit a projector by Adam on the symmetric cross-entropy.

    ``pairs`` is either an iterable of batches (consumed for at most
    ``config.steps`` steps) or a callable mapping the step index to a batch.
    Returns ``(projector, DistillReport)``.
    """
    p = projector.copy() if projector is not None else init_projector(
        config.c_in, config.c_out, config.hidden, config.seed, config.tau)
    if callable(pairs):
        source = (pairs(i) for i in range(config.steps))
    else:
        source = iter(pairs)
    state = AdamState()
    history = []
    loss = float("nan")
    for step in range(config.steps):
        try:
            batch = next(source)
        except StopIteration:
            break
        loss, grads = symmetric_ce_loss(p, batch)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite distillation loss at step {step}: {loss}")
        p.params = optimizer_step(p.params, grads, state, config.lr)
        history.append(loss)
    report = DistillReport(len(history), loss if history else float("nan"), history)
    if held_out is not None:
        za = apply_projector(p, held_out.feats_a)
        zb = apply_projector(p, held_out.feats_b)
        report.diagonal_fraction = diagonal_argmax_fraction(za @ zb.T)
        report.raw_diagonal_fraction = diagonal_argmax_fraction(
            cosine_matrix(held_out.feats_a, held_out.feats_b))
    return p, report


# --------------------------------------------------------------------------
# checkpoint I/O
#
# Layout (little-endian):
#   b"VSPJ", u32 version=1, u32 C_in, u32 C_out, f32 tau, u32 hidden,
#   f32 w_down[C_in*hidden], f32 b_down[hidden], f32 w_up[hidden*C_out],
#   f32 b_up[C_out], and f32 w_res[C_in*C_out] only when C_in != C_out.
# Matrices are row-major with the input dimension first.

PROJECTOR_MAGIC = b"VSPJ"
PROJECTOR_VERSION = 1


def save_projector(path, p: BottleneckProjector) -> None:
    with open(path, "wb") as f:
        f.write(PROJECTOR_MAGIC)
        f.write(struct.pack("<IIIfI", PROJECTOR_VERSION, p.c_in, p.c_out, p.tau, p.hidden))
        for name in PROJECTOR_ORDER:
            if name in p.params:
                f.write(np.ascontiguousarray(p.params[name], dtype="<f4").tobytes())


def load_projector(path) -> BottleneckProjector:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != PROJECTOR_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {PROJECTOR_MAGIC!r}")
    if len(blob) < 24:
        raise ValueError(f"{path}: truncated header")
    version, c_in, c_out, tau, hidden = struct.unpack_from("<IIIfI", blob, 4)
    if version != PROJECTOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shapes = {"w_down": (c_in, hidden), "b_down": (hidden,), "w_up": (hidden, c_out),
              "b_up": (c_out,)}
    if c_in != c_out:
        shapes["w_res"] = (c_in, c_out)
    need = 24 + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    offset = 24
    params = {}
    for name in PROJECTOR_ORDER:
        if name not in shapes:
            continue
        n = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(blob, "<f4", n, offset).reshape(shapes[name]).astype(np.float64)
        offset += 4 * n
    return BottleneckProjector(params, float(tau))
