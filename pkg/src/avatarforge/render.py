"""Volume rendering of the coarse field: stratified ray marching with
occupancy skipping, transmittance/mask accumulation, learnable background,
alpha composition. Foreground color is accumulated premultiplied, so the
final image is I_fg + (1 - M) * I_bg.
"""

from __future__ import annotations

import numpy as np
import torch

from .cameras import CameraSpec, ray_grid
from .field import DTYPE, Mlp

MAX_SAMPLES = 192


class Background:
    """Direction-only environment color: 4-band sinusoidal encoding of the
    unit ray direction into a two-layer perceptron."""

    N_BANDS = 4

    def __init__(self, rng=None, hidden=32):
        rng = rng or np.random.default_rng(0)
        n_in = 3 + 3 * 2 * self.N_BANDS
        self.mlp = Mlp(n_in, hidden, 3, rng, zero_out=True, prefix="background")

    def parameters(self):
        return self.mlp.parameters()

    def encode(self, dirs):
        d = torch.as_tensor(dirs, dtype=DTYPE)
        feats = [d]
        for b in range(self.N_BANDS):
            feats.append(torch.sin(2.0 ** b * np.pi * d))
            feats.append(torch.cos(2.0 ** b * np.pi * d))
        return torch.cat(feats, dim=-1)

    def __call__(self, dirs):
        return torch.sigmoid(self.mlp(self.encode(dirs)))


def _aabb_intersect(origins, dirs, lo, hi):
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    near = np.maximum(tmin, 1e-3)
    far = tmax
    hit = far > near
    return near, far, hit


def composite(fg, mask, bg):
    """Alpha composition with premultiplied foreground."""
    if fg.shape != bg.shape or fg.shape[:-1] != mask.shape:
        raise ValueError("composite: shape mismatch")
    m = mask.unsqueeze(-1) if isinstance(mask, torch.Tensor) else mask[..., None]
    return fg + (1.0 - m) * bg


def render(field, occupancy, bg: Background, spec: CameraSpec, posed=None,
           n_samples: int = MAX_SAMPLES, rng=None, with_normals: bool = False,
           near_body_max_dist: float = 0.35):
    """Render (rgb, mask, normal) images as torch tensors.

    posed: optional PosedBody; when given, samples are drawn in deformed
    space and mapped to canonical coordinates before field queries.
    rng: numpy Generator for the stratified jitter (None = midpoint rule).
    """
    n_samples = min(n_samples, MAX_SAMPLES)
    H, W = spec.height, spec.width
    origins, dirs = ray_grid(spec)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    n_rays = origins.shape[0]

    if posed is not None:
        lo = posed.vertices.min(axis=0) - 0.2
        hi = posed.vertices.max(axis=0) + 0.2
    else:
        lo, hi = field.bounds.lo, field.bounds.hi
    near, far, hit = _aabb_intersect(origins, dirs, lo, hi)
    far = np.where(hit, far, near)

    if rng is None:
        jitter = np.full((n_rays, n_samples), 0.5)
    else:
        jitter = rng.uniform(0.0, 1.0, size=(n_rays, n_samples))
    frac = (np.arange(n_samples) + jitter) / n_samples
    t = near[:, None] + frac * (far - near)[:, None]
    delta = ((far - near) / n_samples)[:, None]  # constant per ray

    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    keep = np.repeat(hit, n_samples)

    if posed is not None:
        # prune far-from-body samples before the (expensive) inverse warp
        idx = np.nonzero(keep)[0]
        dist = posed.capsule_distance(flat[idx])
        keep[idx[dist > near_body_max_dist]] = False
        canon = np.zeros_like(flat)
        idx = np.nonzero(keep)[0]
        if idx.size:
            canon[idx] = posed.inverse_deform(flat[idx])
    else:
        canon = flat

    if occupancy is not None:
        keep &= occupancy.lookup(canon)
    keep &= field.bounds.contains(canon)

    sigma = torch.zeros(n_rays * n_samples, dtype=DTYPE)
    color = torch.zeros(n_rays * n_samples, 3, dtype=DTYPE)
    idx = np.nonzero(keep)[0]
    if idx.size:
        x_t = torch.tensor(canon[idx], dtype=DTYPE)
        body_d = field.body_sdf(canon[idx])
        dsig, rgb = field.decode(x_t)
        tau = field.base_density(body_d)
        sig = torch.clamp(tau + dsig, min=0.0)
        ti = torch.from_numpy(idx)
        sigma = sigma.index_put((ti,), sig)
        color = color.index_put((ti,), rgb)

    sigma = sigma.view(n_rays, n_samples)
    color = color.view(n_rays, n_samples, 3)
    delta_t = torch.tensor(delta, dtype=DTYPE)

    alpha = 1.0 - torch.exp(-sigma * delta_t)
    trans = torch.cumprod(
        torch.cat([torch.ones(n_rays, 1, dtype=DTYPE), 1.0 - alpha], dim=1),
        dim=1)[:, :-1]
    weights = trans * alpha
    mask = weights.sum(dim=1)
    fg = (weights.unsqueeze(-1) * color).sum(dim=1)

    bg_rgb = bg(dirs) if bg is not None else torch.zeros(n_rays, 3, dtype=DTYPE)
    img = composite(fg, mask, bg_rgb)

    normal_img = None
    if with_normals:
        normal_img = np.zeros((n_rays * n_samples, 3))
        if idx.size:
            normal_img[idx] = field.normal(canon[idx])
        normal_img = (weights.detach().numpy()[..., None]
                      * normal_img.reshape(n_rays, n_samples, 3)).sum(axis=1)
        normal_img = torch.tensor(0.5 * (normal_img + 1.0), dtype=DTYPE)
        normal_img = normal_img.view(H, W, 3)

    final_trans = trans[:, -1] * (1.0 - alpha[:, -1])
    aux = {"transmittance": final_trans.view(H, W)}
    return img.view(H, W, 3), mask.view(H, W), normal_img, aux
