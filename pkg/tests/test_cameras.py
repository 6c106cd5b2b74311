"""Camera conventions, intrinsics and ray generation."""

import numpy as np
import pytest

from avatarforge.cameras import (CameraSpec, camera_from_spec, project,
                                 ray_grid)


def test_position_azimuth_zero():
    spec = CameraSpec(radius=2.0, elevation=0.0, azimuth=0.0,
                      look_at=(0, 0, 0))
    c2w, _ = camera_from_spec(spec)
    assert np.allclose(c2w[:3, 3], [0, 0, 2], atol=1e-12)


def test_position_azimuth_180():
    spec = CameraSpec(radius=2.0, elevation=0.0, azimuth=180.0,
                      look_at=(0, 0, 0))
    c2w, _ = camera_from_spec(spec)
    assert np.allclose(c2w[:3, 3], [0, 0, -2], atol=1e-12)


def test_focal_length():
    spec = CameraSpec(fov=60.0, width=512, height=512)
    _, intr = camera_from_spec(spec)
    assert abs(intr[0, 0] - 256.0 / np.tan(np.deg2rad(30.0))) < 1e-9
    assert abs(intr[0, 0] - 443.405) < 1e-3


def test_fov_validation():
    with pytest.raises(ValueError):
        camera_from_spec(CameraSpec(fov=0.0))
    with pytest.raises(ValueError):
        camera_from_spec(CameraSpec(fov=180.0))


def test_center_ray_hits_target():
    spec = CameraSpec(radius=1.5, elevation=23.0, azimuth=137.0,
                      width=64, height=64, look_at=(0.1, 0.9, -0.2))
    origins, dirs = ray_grid(spec)
    center = dirs[31:33, 31:33].reshape(-1, 3).mean(axis=0)
    center /= np.linalg.norm(center)
    target = np.asarray(spec.look_at)
    eye = origins[0, 0]
    expected = (target - eye) / np.linalg.norm(target - eye)
    assert np.allclose(center, expected, atol=1e-3)


def test_rays_unit_norm():
    _, dirs = ray_grid(CameraSpec(width=16, height=16))
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)


def test_project_ray_round_trip():
    spec = CameraSpec(radius=2.0, elevation=-5.0, azimuth=300.0,
                      width=128, height=96, look_at=(0, 1, 0))
    c2w, intr = camera_from_spec(spec)
    origins, dirs = ray_grid(spec)
    # a point along the ray of a known pixel projects back onto that pixel
    for py, px in [(10, 20), (50, 90), (95, 1)]:
        point = origins[py, px] + 1.7 * dirs[py, px]
        uv, depth = project(point[None], c2w, intr)
        assert depth[0] > 0
        assert abs(uv[0, 0] - (px + 0.5)) < 1e-6
        assert abs(uv[0, 1] - (py + 0.5)) < 1e-6


def test_with_replaces_fields():
    spec = CameraSpec().with_(radius=9.0)
    assert spec.radius == 9.0
    assert spec.fov == CameraSpec().fov
