"""Camera specification and ray generation.

Conventions: right-handed world, y-up. Azimuth 0 puts the camera on +z
looking at the target; azimuth grows counter-clockwise seen from above.
The camera frame looks down its own -z axis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class CameraSpec:
    radius: float = 1.5
    elevation: float = 0.0  # degrees
    azimuth: float = 0.0    # degrees
    fov: float = 60.0       # vertical, degrees
    width: int = 64
    height: int = 64
    look_at: tuple = (0.0, 0.9, 0.0)

    def with_(self, **kw):
        return replace(self, **kw)


def camera_from_spec(spec: CameraSpec):
    """Return (camera-to-world 4x4, intrinsic 3x3)."""
    if not 0.0 < spec.fov < 180.0:
        raise ValueError(f"fov must be in (0, 180), got {spec.fov}")
    az = np.deg2rad(spec.azimuth)
    el = np.deg2rad(spec.elevation)
    target = np.asarray(spec.look_at, dtype=np.float64)
    offset = spec.radius * np.array([
        np.cos(el) * np.sin(az),
        np.sin(el),
        np.cos(el) * np.cos(az),
    ])
    eye = target + offset

    forward = target - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    true_up = np.cross(right, forward)

    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward  # camera looks down -z
    c2w[:3, 3] = eye

    focal = 0.5 * spec.height / np.tan(0.5 * np.deg2rad(spec.fov))
    intr = np.array([
        [focal, 0.0, 0.5 * spec.width],
        [0.0, focal, 0.5 * spec.height],
        [0.0, 0.0, 1.0],
    ])
    return c2w, intr


def ray_grid(spec: CameraSpec):
    """Per-pixel (origin, unit direction) arrays, shape (H, W, 3)."""
    c2w, intr = camera_from_spec(spec)
    xs = (np.arange(spec.width) + 0.5 - intr[0, 2]) / intr[0, 0]
    ys = (np.arange(spec.height) + 0.5 - intr[1, 2]) / intr[1, 1]
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, -gy, -np.ones_like(gx)], axis=-1)
    dirs = dirs_cam @ c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


def project(points, c2w, intr):
    """World points -> (pixel xy, depth along -z_cam). Points behind the
    camera get negative depth."""
    pts = np.atleast_2d(points)
    w2c_r = c2w[:3, :3].T
    cam = (pts - c2w[:3, 3]) @ w2c_r.T
    depth = -cam[:, 2]
    z = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
    px = intr[0, 0] * cam[:, 0] / z + intr[0, 2]
    py = -intr[1, 1] * cam[:, 1] / z + intr[1, 2]
    return np.stack([px, py], axis=-1), depth
