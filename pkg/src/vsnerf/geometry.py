"""Pinhole cameras, rays and the radial scene contraction.

Conventions
-----------
Poses are camera-to-world.  In the camera frame the optical axis is +z,
x points right and y points down.  Continuous pixel coordinates place the
centre of texel ``(row v, column u)`` at ``(u, v)``, so integer coordinates
address texels exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of an image downscaled by an integer ``factor``."""
        if factor == 1:
            return self
        w, h = self.width // factor, self.height // factor
        # texel centres: u_small = (u + 0.5) / factor - 0.5
        cx = (self.cx + 0.5) / factor - 0.5
        cy = (self.cy + 0.5) / factor - 0.5
        return CameraIntrinsics(self.fx / factor, self.fy / factor,
                                min(max(cx, 0.0), w - 1), min(max(cy, 0.0), h - 1), w, h)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Pose of a camera at ``eye`` looking at ``target`` with world ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        # re-orthonormalise to kill rounding before the strict check
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    source_view: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def pixel_directions(intrinsics: CameraIntrinsics, pose: Pose, u, v) -> np.ndarray:
    """World-frame unit directions through continuous pixel coordinates."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)],
        axis=-1,
    )
    world = cam @ pose.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_ray(view, pixel: Tuple[float, float], t_near: float = 0.0,
                 t_far: float = 1.0) -> Ray:
    """Back-project pixel ``(u, v)`` of ``view`` into a world-space ray."""
    u, v = float(pixel[0]), float(pixel[1])
    K = view.intrinsics
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ValueError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    d = pixel_directions(K, view.pose, u, v)
    return Ray(view.pose.translation.copy(), d, t_near, t_far)


# absorbs round-off for points that sit exactly on the border texel centres
_EDGE_TOL = 1e-9


def project_points(intrinsics: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Batched projection.

    Returns ``(uv, depth, visible)`` with ``uv`` of shape (..., 2).  A point is
    visible when it lies in front of the camera and inside the interpolable
    pixel rectangle ``[0, W-1] x [0, H-1]``.  Occlusion is not tested.
    """
    cam = pose.world_to_camera(points)
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[..., 1] / z + intrinsics.cy
    tol = _EDGE_TOL
    visible = ((z > 0) & (u >= -tol) & (u <= intrinsics.width - 1 + tol)
               & (v >= -tol) & (v <= intrinsics.height - 1 + tol))
    return np.stack([u, v], axis=-1), z, visible


def project(view, point) -> Optional[Tuple[float, float, float]]:
    """Project a world point into ``view``; ``None`` when it is not visible."""
    uv, z, vis = project_points(view.intrinsics, view.pose, np.asarray(point, dtype=np.float64))
    if not bool(vis):
        return None
    return float(uv[0]), float(uv[1]), float(z)


def contract(x: np.ndarray) -> np.ndarray:
    """Radial contraction: identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside.

    Works on a single point or on any (..., 3) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(r, 1.0)
    return np.where(r <= 1.0, x, (2.0 - 1.0 / safe) * x / safe)


def sphere_intersections(origins: np.ndarray, dirs: np.ndarray, center, radius: float):
    """Near/far ray parameters of a sphere hit (``nan`` where the ray misses).

    ``dirs`` must be unit length.
    """
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        s = np.sqrt(disc)
    t0 = np.where(disc >= 0, -b - s, np.nan)
    t1 = np.where(disc >= 0, -b + s, np.nan)
    return t0, t1
