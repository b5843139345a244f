"""Procedural multi-view scenes with analytic ground truth, and dataset I/O.

A scene is a handful of shaded spheres and axis-aligned boxes inside a large
enclosing sphere whose inside carries a smooth procedural colour, so every
camera ray terminates.  Cameras sit on a ring around a look-at point.

On disk a dataset is a directory holding ``scene.json``, one PFM image per
view and one FMAP file per (view, feature map).  Ground truth, when written,
adds per-view depth / surface-point / hit-id PFMs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import FeatureMap
from .geometry import CameraIntrinsics, Pose, pixel_directions, project_points, sphere_intersections

ENCLOSURE_ID = -1
LIGHT_DIR = np.array([0.4, -0.3, 0.866]) / np.linalg.norm([0.4, -0.3, 0.866])


@dataclass
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    color: Tuple[float, float, float]


@dataclass
class Box:
    center: Tuple[float, float, float]
    half_extent: Tuple[float, float, float]
    color: Tuple[float, float, float]


@dataclass
class SceneSpec:
    spheres: List[Sphere] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    enclosure_radius: float = 6.0
    n_views: int = 12
    ring_radius: float = 3.0
    elevation_deg: float = 20.0
    elevation_jitter_deg: float = 0.0
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = 32
    height: int = 32
    focal: float = 36.0
    color_noise: float = 0.0
    feature_noise: float = 0.0
    feature_dim: int = 32
    feature_frequency: float = 4.0
    raw_feature_dim: int = 0

    def validate(self) -> None:
        for s in self.spheres:
            if not s.radius > 0:
                raise ValueError(f"sphere radius must be positive, got {s.radius}")
        for b in self.boxes:
            if min(b.half_extent) <= 0:
                raise ValueError(f"box half extents must be positive, got {b.half_extent}")
        if self.n_views < 2:
            raise ValueError("a scene needs at least 2 views")
        if self.width < 2 or self.height < 2 or self.focal <= 0:
            raise ValueError("invalid image size or focal length")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        extent = self.max_extent()
        if not self.enclosure_radius > extent:
            raise ValueError(
                f"enclosure radius {self.enclosure_radius} must exceed primitive extent {extent:.3f}")
        if np.linalg.norm(self.look_at) + self.ring_radius >= self.enclosure_radius:
            raise ValueError("cameras must lie inside the enclosure")

    def max_extent(self) -> float:
        ext = [np.linalg.norm(s.center) + s.radius for s in self.spheres]
        ext += [np.linalg.norm(np.abs(b.center) + np.asarray(b.half_extent)) for b in self.boxes]
        return float(max(ext, default=0.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["spheres"] = [Sphere(**s) for s in d.get("spheres", [])]
        d["boxes"] = [Box(**b) for b in d.get("boxes", [])]
        for key in ("look_at",):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def random_scene(seed: int, **overrides) -> SceneSpec:
    """A few randomly placed, randomly coloured primitives inside the unit ball."""
    rng = np.random.default_rng(seed)
    spheres = []
    for _ in range(3):
        r = rng.uniform(0.2, 0.35)
        c = rng.uniform(-1, 1, 3)
        c = c / np.linalg.norm(c) * rng.uniform(0.0, 0.9 - r)
        spheres.append(Sphere(tuple(c), float(r), tuple(rng.uniform(0.1, 0.95, 3))))
    boxes = []
    for _ in range(2):
        h = rng.uniform(0.12, 0.25, 3)
        c = rng.uniform(-1, 1, 3)
        c = c / np.linalg.norm(c) * rng.uniform(0.0, 0.95 - np.linalg.norm(h))
        boxes.append(Box(tuple(c), tuple(h), tuple(rng.uniform(0.1, 0.95, 3))))
    spec = SceneSpec(spheres=spheres, boxes=boxes, **overrides)
    spec.validate()
    return spec


@dataclass
class PosedView:
    intrinsics: CameraIntrinsics
    pose: Pose
    image: np.ndarray
    feature_maps: Dict[str, FeatureMap] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        K = self.intrinsics
        if self.image.shape != (K.height, K.width, 3):
            raise ValueError(f"image shape {self.image.shape} does not match {K.width}x{K.height}x3")
        for name, fm in self.feature_maps.items():
            exp = (K.height // fm.downscale, K.width // fm.downscale)
            if (fm.height, fm.width) != exp:
                raise ValueError(f"feature map {name!r} is {fm.height}x{fm.width}, expected {exp}")


@dataclass
class GroundTruth:
    depth: List[np.ndarray]
    points: List[np.ndarray]
    hit_id: List[np.ndarray]


def camera_ring(spec: SceneSpec) -> List[Tuple[CameraIntrinsics, Pose]]:
    K = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2,
                         spec.width, spec.height)
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for k in range(spec.n_views):
        az = 2 * math.pi * k / spec.n_views
        el = math.radians(spec.elevation_deg + spec.elevation_jitter_deg * (1 if k % 2 else -1))
        eye = target + spec.ring_radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append((K, Pose.look_at(eye, target)))
    return cams


def _box_hits(origins, dirs, box: Box):
    lo = np.asarray(box.center) - box.half_extent
    hi = np.asarray(box.center) + box.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _box_normals(points, box: Box):
    rel = (points - np.asarray(box.center)) / np.asarray(box.half_extent)
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(points)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
    return n


def enclosure_color(directions: np.ndarray) -> np.ndarray:
    """Smooth procedural colour of the enclosure as a function of direction."""
    d = directions
    r = 0.55 + 0.25 * np.sin(3.0 * d[..., 0] + 1.3 * d[..., 2])
    g = 0.50 + 0.25 * np.sin(2.5 * d[..., 1] - 2.0 * d[..., 0] + 0.7)
    b = 0.60 + 0.30 * d[..., 2] + 0.08 * np.cos(4.0 * d[..., 1])
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def trace(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit ray casting.

    Returns ray distance, surface point, shaded colour and hit id (primitive
    index in spheres-then-boxes order, ``-1`` for the enclosure).
    """
    best = np.full(origins.shape[:-1], np.inf)
    hit = np.full(origins.shape[:-1], ENCLOSURE_ID, dtype=np.int64)
    for i, s in enumerate(spec.spheres):
        t0, t1 = sphere_intersections(origins, dirs, s.center, s.radius)
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t = np.nan_to_num(t, nan=np.inf, posinf=np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        hit = np.where(closer, i, hit)
    for j, b in enumerate(spec.boxes):
        t = _box_hits(origins, dirs, b)
        closer = t < best
        best = np.where(closer, t, best)
        hit = np.where(closer, len(spec.spheres) + j, hit)
    _, t_enc = sphere_intersections(origins, dirs, (0.0, 0.0, 0.0), spec.enclosure_radius)
    t_enc = np.nan_to_num(t_enc, nan=np.inf, posinf=np.inf)
    best = np.where(hit == ENCLOSURE_ID, t_enc, best)
    points = origins + best[..., None] * dirs

    color = enclosure_color(points / spec.enclosure_radius)
    for i, s in enumerate(spec.spheres):
        m = hit == i
        if m.any():
            n = (points[m] - np.asarray(s.center)) / s.radius
            color[m] = _shade(np.asarray(s.color), n)
    for j, b in enumerate(spec.boxes):
        m = hit == len(spec.spheres) + j
        if m.any():
            color[m] = _shade(np.asarray(b.color), _box_normals(points[m], b))
    return best, points, color, hit


def _shade(base: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lam = np.clip(normals @ LIGHT_DIR, 0.0, None)
    return base * (0.35 + 0.65 * lam)[..., None]


def enclosure_distance(spec_or_radius, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    radius = getattr(spec_or_radius, "enclosure_radius", spec_or_radius)
    return sphere_intersections(origins, dirs, (0.0, 0.0, 0.0), float(radius))[1]


def fourier_features(dim: int, seed: int, frequency: float) -> Callable[[np.ndarray], np.ndarray]:
    """Fixed random smooth map R^3 -> R^dim built from sinusoids."""
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, frequency, (3, dim))
    phase = rng.uniform(0, 2 * np.pi, dim)
    return lambda x: np.sin(np.asarray(x) @ omega + phase)


def synth_features(surface_points: np.ndarray, dim: int, seed: int, noise: float,
                   rng: Optional[np.random.Generator] = None, frequency: float = 4.0,
                   phi: Optional[Callable] = None, kind: str = "distilled") -> FeatureMap:
    """Features of surface points under a fixed smooth map plus i.i.d. noise.

    ``seed`` selects the smooth map so that all views of a scene share it;
    ``rng`` drives the per-view noise (defaults to a generator seeded from
    ``seed``).  ``phi`` replaces the random map, e.g. for degenerate tests.
    """
    if dim < 1:
        raise ValueError("feature dimension must be >= 1")
    phi = phi or fourier_features(dim, seed, frequency)
    f = np.asarray(phi(surface_points), dtype=np.float64).reshape(*surface_points.shape[:-1], dim)
    if noise > 0:
        rng = rng or np.random.default_rng(seed + 1)
        f = f + noise * rng.normal(size=f.shape)
    metric = "euclidean" if kind == "color" else "cosine"
    return FeatureMap(f, kind=kind, metric=metric)


def synth_scene(spec: SceneSpec, seed: int) -> Tuple[List[PosedView], GroundTruth]:
    """Render every ring camera of ``spec``; deterministic in ``seed``."""
    spec.validate()
    ss = np.random.SeedSequence(seed)
    feat_seed, raw_seed, noise_seq = ss.spawn(3)
    feat_seed = int(feat_seed.generate_state(1)[0])
    raw_seed = int(raw_seed.generate_state(1)[0])
    view_rngs = [np.random.default_rng(s) for s in noise_seq.spawn(spec.n_views)]
    views, depths, points_all, ids = [], [], [], []
    for k, (K, pose) in enumerate(camera_ring(spec)):
        rng = view_rngs[k]
        v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
        dirs = pixel_directions(K, pose, u, v)
        origins = np.broadcast_to(pose.translation, dirs.shape)
        dist, pts, color, hit = trace(spec, origins, dirs)
        z = pose.world_to_camera(pts)[..., 2]
        if spec.color_noise > 0:
            color = color + spec.color_noise * rng.normal(size=color.shape)
        image = np.clip(color, 0.0, 1.0).astype(np.float32)
        fmaps = {
            "color": FeatureMap(image, kind="color", metric="euclidean"),
            "distilled": synth_features(pts, spec.feature_dim, feat_seed, spec.feature_noise, rng,
                                        spec.feature_frequency),
        }
        if spec.raw_feature_dim:
            fmaps["raw"] = synth_features(pts, spec.raw_feature_dim, raw_seed, spec.feature_noise,
                                          rng, spec.feature_frequency, kind="raw")
        views.append(PosedView(K, pose, image, fmaps, name=f"view_{k:03d}"))
        depths.append(z)
        points_all.append(pts)
        ids.append(hit)
    return views, GroundTruth(depths, points_all, ids)


def split_views(n_total: int, n_eval: int) -> Tuple[List[int], List[int]]:
    """Evenly spaced held-out view indices and the remaining training indices."""
    if not 0 < n_eval < n_total:
        raise ValueError(f"need 0 < n_eval < n_total, got {n_eval}, {n_total}")
    step = n_total / n_eval
    held = sorted({int(step * i + step / 2) for i in range(n_eval)})
    train = [i for i in range(n_total) if i not in held]
    return train, held


def correspondences(views: Sequence[PosedView], gt: GroundTruth, k: int, rng: np.random.Generator,
                    feature: str = "raw", depth_tol: float = 0.02, max_tries: int = 50):
    """Matched feature vectors of ``k`` surface points seen by two distinct views.

    Points come from primitive hits in view ``a``; a match is kept when the
    point projects inside view ``b`` and is not occluded there (ground-truth
    depth agrees within ``depth_tol`` relative).  Returns ``(feats_a, feats_b)``.
    """
    if len(views) < 2:
        raise ValueError("correspondences need at least 2 views")
    fa, fb = [], []
    for _ in range(max_tries):
        a, b = rng.choice(len(views), 2, replace=False)
        va, vb = views[a], views[b]
        hv, hu = np.nonzero(gt.hit_id[a] >= 0)
        if hv.size == 0:
            continue
        pick = rng.choice(hv.size, min(hv.size, 4 * k), replace=False)
        hv, hu = hv[pick], hu[pick]
        uv, z, vis = project_points(vb.intrinsics, vb.pose, gt.points[a][hv, hu])
        ub = np.rint(uv[:, 0]).astype(int).clip(0, vb.intrinsics.width - 1)
        vb_ = np.rint(uv[:, 1]).astype(int).clip(0, vb.intrinsics.height - 1)
        ok = vis & (np.abs(gt.depth[b][vb_, ub] - z) <= depth_tol * np.abs(z))
        if not ok.any():
            continue
        fa.append(va.feature_maps[feature].sample(hu[ok].astype(float), hv[ok].astype(float)))
        fb.append(vb.feature_maps[feature].sample(uv[ok, 0], uv[ok, 1]))
        if sum(len(x) for x in fa) >= k:
            break
    if not fa or sum(len(x) for x in fa) < k:
        raise ValueError(f"could not find {k} unoccluded correspondences")
    return np.concatenate(fa)[:k], np.concatenate(fb)[:k]


# --------------------------------------------------------------------------
# binary formats

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    pass


def write_fmap(path, fmap: FeatureMap) -> None:
    H, W, C = fmap.data.shape
    with open(path, "wb") as f:
        f.write(_FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, H, W, C, fmap.downscale))
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def read_fmap(path, kind: str = "raw", metric: str = "cosine") -> FeatureMap:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FMAP_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated FMAP header")
    magic, version, H, W, C, down = _FMAP_HEADER.unpack_from(blob)
    if magic != FMAP_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise DatasetFormatError(f"{path}: unsupported FMAP version {version}")
    n = H * W * C
    if len(blob) != _FMAP_HEADER.size + 4 * n:
        raise DatasetFormatError(
            f"{path}: expected {n} floats for {H}x{W}x{C}, file holds {(len(blob) - _FMAP_HEADER.size) / 4:g}")
    data = np.frombuffer(blob, "<f4", n, _FMAP_HEADER.size).reshape(H, W, C)
    return FeatureMap(data.astype(np.float32), kind=kind, metric=metric, downscale=down)


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM holds HxW or HxWx3 arrays, got {data.shape}")
    H, W = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise DatasetFormatError(f"{path}: not a PFM file (header {kind!r})")
        try:
            W, H = (int(x) for x in f.readline().split())
            scale = float(f.readline())
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: malformed PFM header") from exc
        C = 3 if kind == b"PF" else 1
        endian = "<" if scale < 0 else ">"
        raw = f.read()
    if len(raw) != 4 * H * W * C:
        raise DatasetFormatError(f"{path}: expected {H * W * C} floats, found {len(raw) / 4:g}")
    data = np.frombuffer(raw, endian + "f4").reshape((H, W, C) if C == 3 else (H, W))
    return data[::-1].astype(np.float32)


def write_dataset(path, views: Sequence[PosedView], ground_truth: Optional[GroundTruth] = None,
                  extra: Optional[dict] = None) -> None:
    """Write ``scene.json`` plus PFM images and FMAP feature files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cams = []
    for k, view in enumerate(views):
        stem = view.name or f"view_{k:03d}"
        K, pose = view.intrinsics, view.pose
        entry = {
            "name": stem,
            "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
            "width": K.width, "height": K.height,
            "rotation": pose.rotation.reshape(-1).tolist(),
            "translation": pose.translation.tolist(),
            "image": f"{stem}.pfm",
            "features": {},
        }
        write_pfm(root / entry["image"], view.image)
        for fname, fmap in view.feature_maps.items():
            fn = f"{stem}.{fname}.fmap"
            write_fmap(root / fn, fmap)
            entry["features"][fname] = {"file": fn, "kind": fmap.kind, "metric": fmap.metric}
        if ground_truth is not None:
            entry["ground_truth"] = {
                "depth": f"{stem}.depth.pfm",
                "points": f"{stem}.points.pfm",
                "hit_id": f"{stem}.hit.pfm",
            }
            write_pfm(root / entry["ground_truth"]["depth"], ground_truth.depth[k])
            write_pfm(root / entry["ground_truth"]["points"], ground_truth.points[k])
            write_pfm(root / entry["ground_truth"]["hit_id"], ground_truth.hit_id[k].astype(np.float32))
        cams.append(entry)
    doc = {"format": "vsnerf-dataset", "version": 1, "cameras": cams}
    if extra:
        doc.update(extra)
    (root / "scene.json").write_text(json.dumps(doc, indent=2))


def read_dataset(path):
    """Load a dataset directory.

    Returns ``(views, ground_truth_or_None, meta)`` where ``meta`` is the
    parsed ``scene.json`` document.
    """
    root = Path(path)
    meta_path = root / "scene.json"
    try:
        doc = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{meta_path}: missing") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    if doc.get("format") != "vsnerf-dataset" or doc.get("version") != 1:
        raise DatasetFormatError(f"{meta_path}: unsupported format/version")
    views, gt = [], GroundTruth([], [], [])
    have_gt = True
    for cam in doc["cameras"]:
        try:
            K = CameraIntrinsics(cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["width"], cam["height"])
            pose = Pose(np.array(cam["rotation"]).reshape(3, 3), np.array(cam["translation"]))
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"{meta_path}: bad camera entry {cam.get('name')}: {exc}") from exc
        image = read_pfm(root / cam["image"])
        fmaps = {}
        for fname, info in cam.get("features", {}).items():
            fmaps[fname] = read_fmap(root / info["file"], info["kind"], info["metric"])
        try:
            views.append(PosedView(K, pose, image, fmaps, name=cam.get("name", "")))
        except ValueError as exc:
            raise DatasetFormatError(f"{meta_path}: view {cam.get('name')}: {exc}") from exc
        g = cam.get("ground_truth")
        if g is None:
            have_gt = False
            continue
        gt.depth.append(read_pfm(root / g["depth"]))
        gt.points.append(read_pfm(root / g["points"]))
        gt.hit_id.append(read_pfm(root / g["hit_id"]).astype(np.int64))
    return views, (gt if have_gt else None), doc
