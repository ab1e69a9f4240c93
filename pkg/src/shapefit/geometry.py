"""Coordinate frames, pinhole camera model, rays, and rigid transforms.

Conventions used throughout the package:

* World frame is right-handed, z-up, with the ground near z = 0.
* Camera frame is the usual computer-vision one: x right, y down, z forward.
* Pixel coordinates are (u, v) = (column, row), origin at the top-left,
  continuous values, integer coordinates at pixel centers.
* Object yaw is a rotation about the world z axis, stored wrapped to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadCalibration, NonPositiveDepth

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = theta % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    w = np.asarray(theta, dtype=np.float64) % TWO_PI
    return np.where(w > math.pi, w - TWO_PI, w)


@dataclass(frozen=True)
class Pose:
    """Object placement: center (x, y, z) in meters plus yaw about world z."""

    x: float
    y: float
    z: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose components: {vals}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=np.float64)
        return Pose(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def yaw_matrix(theta: float) -> np.ndarray:
    """3x3 rotation about z by theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Camera:
    """Pinhole camera: 3x3 intrinsics, 4x4 world-to-camera transform, size."""

    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int
    # derived, filled in __post_init__
    rotation: np.ndarray = field(init=False, repr=False)
    translation: np.ndarray = field(init=False, repr=False)
    center: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise BadCalibration(f"focal lengths must be positive, got {K[0,0]}, {K[1,1]}")
        if self.width <= 0 or self.height <= 0:
            raise BadCalibration("image dimensions must be positive")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise BadCalibration("rotation block of world_to_camera is not orthonormal")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise BadCalibration("last row of world_to_camera must be [0,0,0,1]")
        self.intrinsics = K
        self.world_to_camera = T
        self.rotation = R
        self.translation = T[:3, 3]
        self.center = -R.T @ self.translation

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])


@dataclass(frozen=True)
class Ray:
    """Half line in world coordinates; direction has unit norm."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit, |d| = {n}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def project_point(cam: Camera, x) -> tuple[float, float, float]:
    """Project a world point to continuous pixel coordinates.

    Returns (u, v, depth) with depth the camera-frame forward coordinate.
    Raises NonPositiveDepth for points at or behind the camera plane.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = cam.rotation @ x + cam.translation
    if xc[2] <= 0.0:
        raise NonPositiveDepth(f"point depth {xc[2]:.6g} <= 0")
    u = cam.fx * xc[0] / xc[2] + cam.cx
    v = cam.fy * xc[1] / xc[2] + cam.cy
    return float(u), float(v), float(xc[2])


def project_points(cam: Camera, xs: np.ndarray):
    """Vectorized projection of an (N, 3) array.

    Returns (uv (N, 2), depth (N,)); points behind the camera keep their
    (negative) depth so callers can filter, with uv set to NaN there.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    xc = xs @ cam.rotation.T + cam.translation
    depth = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * xc[:, 0] / depth + cam.cx
        v = cam.fy * xc[:, 1] / depth + cam.cy
    uv = np.stack([u, v], axis=1)
    uv[depth <= 0.0] = np.nan
    return uv, depth


def ray_through_pixel(cam: Camera, u: float, v: float) -> Ray:
    """World-frame ray from the camera center through pixel (u, v)."""
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=cam.center.copy(), direction=d_world)


def rays_through_pixels(cam: Camera, uv: np.ndarray):
    """Vectorized version of ray_through_pixel for an (N, 2) pixel array.

    Returns (origin (3,), directions (N, 3) unit vectors).
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d_cam = np.stack(
        [(uv[:, 0] - cam.cx) / cam.fx, (uv[:, 1] - cam.cy) / cam.fy, np.ones(len(uv))],
        axis=1,
    )
    d_world = d_cam @ cam.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return cam.center.copy(), d_world


def object_to_world(p: Pose, x_local) -> np.ndarray:
    """Rotate by yaw about z, then translate by the pose center."""
    x = np.asarray(x_local, dtype=np.float64)
    R = yaw_matrix(p.theta)
    return x @ R.T + p.center


def world_to_object(p: Pose, x_world) -> np.ndarray:
    """Inverse of object_to_world."""
    x = np.asarray(x_world, dtype=np.float64)
    R = yaw_matrix(p.theta)
    return (x - p.center) @ R


def make_camera(
    position,
    yaw: float = 0.0,
    pitch: float = 0.0,
    fx: float = 540.0,
    fy: float = 540.0,
    width: int = 960,
    height: int = 540,
) -> Camera:
    """Build a camera at `position` looking along world +x (then yawed/pitched).

    pitch > 0 tilts the optical axis downward. Principal point is the image
    center.
    """
    # camera axes in world coordinates (right-handed: right x down = forward)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    fwd = np.array([cy * cp, sy * cp, -sp])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=0)  # world->camera rows
    t = -R_wc @ np.asarray(position, dtype=np.float64)
    T = np.eye(4)
    T[:3, :3] = R_wc
    T[:3, 3] = t
    K = np.array([[fx, 0.0, (width - 1) / 2.0], [0.0, fy, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    return Camera(intrinsics=K, world_to_camera=T, width=width, height=height)
