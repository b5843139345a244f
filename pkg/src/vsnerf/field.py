"""A small density/colour MLP with frequency encodings and exact backprop.

Architecture::

    xc    = contract(x)
    h     = relu(... relu(enc(xc) W_0 + b_0) ... W_{D-1} + b_{D-1})      # D trunk layers
    [s, g] = h W_out + b_out                                           # s: raw density
    sigma = softplus(s)
    a     = relu([g, enc(d)] W_head + b_head)
    c     = sigmoid(a W_rgb + b_rgb)

All gradients are derived by hand; :func:`query_batch_with_grads` returns the
parameter gradient for arbitrary upstream adjoints of ``(sigma, c)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .geometry import contract


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("number of frequencies must be >= 0")

    def out_dim(self, in_dim: int = 3) -> int:
        return in_dim * (2 * self.num_frequencies + int(self.include_input))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        parts = [x] if self.include_input else []
        for k in range(self.num_frequencies):
            w = (2.0**k) * math.pi
            parts.append(np.sin(w * x))
            parts.append(np.cos(w * x))
        if not parts:
            return np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)
        return np.concatenate(parts, axis=-1)

    def backward(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Gradient wrt ``x`` given the gradient wrt the encoding."""
        d = x.shape[-1]
        out = np.zeros_like(x)
        off = 0
        if self.include_input:
            out += grad[..., :d]
            off = d
        for k in range(self.num_frequencies):
            w = (2.0**k) * math.pi
            out += grad[..., off:off + d] * w * np.cos(w * x)
            out -= grad[..., off + d:off + 2 * d] * w * np.sin(w * x)
            off += 2 * d
        return out


@dataclass(frozen=True)
class FieldConfig:
    width: int = 64
    depth: int = 4
    pos_frequencies: int = 6
    dir_frequencies: int = 2
    include_input: bool = True
    head_width: int = 32

    def validate(self) -> None:
        if self.width < 1 or self.depth < 1 or self.head_width < 1:
            raise ValueError(f"network sizes must be positive: {self}")
        if self.pos_frequencies < 0 or self.dir_frequencies < 0:
            raise ValueError("frequency counts must be >= 0")


class RadianceField:
    def __init__(self, config: FieldConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.pos_enc = PositionalEncoding(config.pos_frequencies, config.include_input)
        self.dir_enc = PositionalEncoding(config.dir_frequencies, config.include_input)

    @property
    def dtype(self):
        return self.params["w0"].dtype

    def param_order(self) -> List[str]:
        return param_names(self.config)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "RadianceField":
        return RadianceField(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "RadianceField":
        return RadianceField(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def param_names(config: FieldConfig) -> List[str]:
    names = []
    for i in range(config.depth):
        names += [f"w{i}", f"b{i}"]
    return names + ["w_out", "b_out", "w_head", "b_head", "w_rgb", "b_rgb"]


def param_shapes(config: FieldConfig) -> Dict[str, Tuple[int, ...]]:
    pe = PositionalEncoding(config.pos_frequencies, config.include_input).out_dim()
    de = PositionalEncoding(config.dir_frequencies, config.include_input).out_dim()
    shapes = {}
    fan_in = pe
    for i in range(config.depth):
        shapes[f"w{i}"] = (fan_in, config.width)
        shapes[f"b{i}"] = (config.width,)
        fan_in = config.width
    shapes["w_out"] = (config.width, 1 + config.width)
    shapes["b_out"] = (1 + config.width,)
    shapes["w_head"] = (config.width + de, config.head_width)
    shapes["b_head"] = (config.head_width,)
    shapes["w_rgb"] = (config.head_width, 3)
    shapes["b_rgb"] = (3,)
    return shapes


def init_field(config: FieldConfig = FieldConfig(), seed: int = 0, dtype=np.float32) -> RadianceField:
    """He-normal weights (std sqrt(2/fan_in)), zero biases; deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("w"):
            params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return RadianceField(config, params)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward(field: RadianceField, xs: np.ndarray, ds: np.ndarray, keep: bool):
    p = field.params
    dt = field.dtype
    xs = np.asarray(xs)
    ds = np.asarray(ds)
    if xs.shape[-1] != 3 or ds.shape != xs.shape:
        raise ValueError(f"positions {xs.shape} and directions {ds.shape} must both be (..., 3)")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ds))):
        raise ValueError("non-finite field input")
    lead = xs.shape[:-1]
    xs = xs.reshape(-1, 3)
    ds = ds.reshape(-1, 3)
    enc_x = field.pos_enc(contract(xs).astype(dt, copy=False))
    enc_d = field.dir_enc(ds.astype(dt, copy=False))
    acts = [enc_x]
    h = enc_x
    for i in range(field.config.depth):
        h = np.maximum(h @ p[f"w{i}"] + p[f"b{i}"], 0)
        acts.append(h)
    out = h @ p["w_out"] + p["b_out"]
    s_raw = out[:, 0]
    g = out[:, 1:]
    head_in = np.concatenate([g, enc_d], axis=1)
    a = np.maximum(head_in @ p["w_head"] + p["b_head"], 0)
    rgb_raw = a @ p["w_rgb"] + p["b_rgb"]
    sigma = softplus(s_raw)
    rgb = sigmoid(rgb_raw)
    cache = (acts, s_raw, head_in, a, rgb) if keep else None
    return sigma.reshape(lead), rgb.reshape(lead + (3,)), cache


def query_batch(field: RadianceField, xs: np.ndarray, ds: np.ndarray):
    """Densities (...,) and colours (..., 3) at positions ``xs`` seen along ``ds``."""
    sigma, rgb, _ = _forward(field, xs, ds, keep=False)
    return sigma, rgb


def query(field: RadianceField, x, d):
    """Single-point query returning ``(sigma, rgb)``."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    sigma, rgb = query_batch(field, np.asarray(x, dtype=np.float64)[None], d[None])
    return float(sigma[0]), rgb[0]


def forward_with_cache(field: RadianceField, xs, ds):
    return _forward(field, xs, ds, keep=True)


def backward(field: RadianceField, cache, d_sigma: np.ndarray, d_rgb: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients from adjoints of the outputs of :func:`forward_with_cache`."""
    acts, s_raw, head_in, a, rgb = cache
    p = field.params
    dt = field.dtype
    d_sigma = np.asarray(d_sigma, dtype=dt).reshape(-1)
    d_rgb = np.asarray(d_rgb, dtype=dt).reshape(-1, 3)
    if d_sigma.shape[0] != s_raw.shape[0] or d_rgb.shape[0] != s_raw.shape[0]:
        raise ValueError("adjoint shapes do not match the cached forward pass")
    grads = {}
    d_rgb_raw = d_rgb * rgb * (1 - rgb)
    grads["w_rgb"] = a.T @ d_rgb_raw
    grads["b_rgb"] = d_rgb_raw.sum(axis=0)
    da = (d_rgb_raw @ p["w_rgb"].T) * (a > 0)
    grads["w_head"] = head_in.T @ da
    grads["b_head"] = da.sum(axis=0)
    d_head_in = da @ p["w_head"].T
    width = field.config.width
    d_out = np.empty((s_raw.shape[0], 1 + width), dtype=dt)
    d_out[:, 0] = d_sigma * sigmoid(s_raw)          # softplus' = sigmoid
    d_out[:, 1:] = d_head_in[:, :width]
    h = acts[-1]
    grads["w_out"] = h.T @ d_out
    grads["b_out"] = d_out.sum(axis=0)
    dh = d_out @ p["w_out"].T
    for i in reversed(range(field.config.depth)):
        dpre = dh * (acts[i + 1] > 0)
        grads[f"w{i}"] = acts[i].T @ dpre
        grads[f"b{i}"] = dpre.sum(axis=0)
        if i:
            dh = dpre @ p[f"w{i}"].T
    return grads


def query_batch_with_grads(field: RadianceField, xs, ds, d_sigma, d_rgb) -> Dict[str, np.ndarray]:
    """Exact reverse-mode parameter gradient of ``sum(d_sigma*sigma) + sum(d_rgb*c)``."""
    xs = np.asarray(xs)
    d_sigma = np.asarray(d_sigma)
    d_rgb = np.asarray(d_rgb)
    if d_sigma.shape != xs.shape[:-1] or d_rgb.shape != xs.shape:
        raise ValueError("upstream adjoints must match the query batch shape")
    _, _, cache = _forward(field, xs, ds, keep=True)
    return backward(field, cache, d_sigma, d_rgb)


# --------------------------------------------------------------------------
# checkpoint I/O
#
# Layout (little-endian):
#   b"VSFD", u32 version=1,
#   u32 width, u32 depth, u32 pos_frequencies, u32 dir_frequencies,
#   u32 include_input, u32 head_width,
#   then f32 arrays in param_names() order:
#   w0, b0, ..., w{D-1}, b{D-1}, w_out, b_out, w_head, b_head, w_rgb, b_rgb.
# Weight matrices are row-major (fan_in, fan_out).

FIELD_MAGIC = b"VSFD"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<4sIIIIIII")


def save_field(path, field: RadianceField) -> None:
    c = field.config
    with open(path, "wb") as f:
        f.write(_FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, c.width, c.depth, c.pos_frequencies,
                                   c.dir_frequencies, int(c.include_input), c.head_width))
        for name in param_names(c):
            f.write(np.ascontiguousarray(field.params[name], dtype="<f4").tobytes())


def load_field(path, dtype=np.float32) -> RadianceField:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FIELD_HEADER.size:
        raise ValueError(f"{path}: truncated field checkpoint")
    magic, version, width, depth, pf, df, inc, hw = _FIELD_HEADER.unpack_from(blob)
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    config = FieldConfig(width, depth, pf, df, bool(inc), hw)
    shapes = param_shapes(config)
    need = _FIELD_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    offset = _FIELD_HEADER.size
    params = {}
    for name in param_names(config):
        n = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(blob, "<f4", n, offset).reshape(shapes[name]).astype(dtype)
        offset += 4 * n
    return RadianceField(config, params)


def config_dict(config: FieldConfig) -> dict:
    return asdict(config)
