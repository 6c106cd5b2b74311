"""Canonical-space volumetric avatar: multi-resolution hash grid encoder,
small decoder for residual density and color, occupancy pruning.

The base density comes from the body SDF prior: sigma = tau + delta_sigma
with tau = sigmoid(-d/alpha)/alpha, clamped at zero. Everything runs in
float64 torch so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

_HASH_PRIMES = (1, 2654435761, 805459861)


class GridEncoder:
    """InstantNGP-style multi-resolution feature lattice with trilinear
    interpolation; fine levels index a fixed table through a spatial hash."""

    def __init__(self, bounds_lo, bounds_hi, n_levels=8, base_res=16,
                 growth=1.5, feat_dim=2, table_size=2 ** 19, rng=None):
        self.lo = torch.as_tensor(bounds_lo, dtype=DTYPE)
        self.hi = torch.as_tensor(bounds_hi, dtype=DTYPE)
        self.n_levels = n_levels
        self.feat_dim = feat_dim
        self.table_size = table_size
        self.res = [int(np.floor(base_res * growth ** l)) for l in range(n_levels)]
        self.sizes = [min((r + 1) ** 3, table_size) for r in self.res]
        rng = rng or np.random.default_rng(0)
        init = rng.uniform(-1e-4, 1e-4, size=(sum(self.sizes), feat_dim))
        self.table = torch.tensor(init, dtype=DTYPE, requires_grad=True)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])

    @property
    def out_dim(self):
        return self.n_levels * self.feat_dim

    def parameters(self):
        return {"encoder.table": self.table}

    def _corner_index(self, level, ijk):
        r = self.res[level]
        if (r + 1) ** 3 <= self.table_size:
            idx = (ijk[..., 0] * (r + 1) + ijk[..., 1]) * (r + 1) + ijk[..., 2]
        else:
            h = (ijk[..., 0] * _HASH_PRIMES[0]
                 ^ ijk[..., 1] * _HASH_PRIMES[1]
                 ^ ijk[..., 2] * _HASH_PRIMES[2])
            idx = h % self.table_size
        return idx + int(self.offsets[level])

    _CORNERS = torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1]
                             for c in range(8)], dtype=torch.long)

    def __call__(self, x):
        """x: (N, 3) tensor in world units -> (N, L*F) features.

        All levels and corners are gathered from the table in one indexing
        op so the sparse backward pass allocates a single gradient buffer."""
        u = (x - self.lo) / (self.hi - self.lo)
        u = torch.clamp(u, 0.0, 1.0)
        n = x.shape[0]
        idx = torch.empty(n, self.n_levels, 8, dtype=torch.long)
        weights = []
        for l in range(self.n_levels):
            g = u * self.res[l]
            i0 = torch.clamp(g.detach().floor().long(), 0, self.res[l] - 1)
            f = g - i0                                     # (N, 3)
            ijk = i0.unsqueeze(1) + self._CORNERS.unsqueeze(0)  # (N, 8, 3)
            idx[:, l] = self._corner_index(l, ijk)
            on = self._CORNERS.unsqueeze(0).to(DTYPE)      # (1, 8, 3)
            fc = f.unsqueeze(1)                            # (N, 1, 3)
            w = on * fc + (1.0 - on) * (1.0 - fc)
            weights.append(w[..., 0] * w[..., 1] * w[..., 2])
        w = torch.stack(weights, dim=1)                    # (N, L, 8)
        vals = self.table[idx.reshape(-1)].view(n, self.n_levels, 8,
                                                self.feat_dim)
        return (w.unsqueeze(-1) * vals).sum(dim=2).reshape(n, -1)


def _linear(rng, n_in, n_out, zero=False):
    if zero:
        w = np.zeros((n_out, n_in))
    else:
        s = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-s, s, size=(n_out, n_in))
    return (torch.tensor(w, dtype=DTYPE, requires_grad=True),
            torch.zeros(n_out, dtype=DTYPE, requires_grad=True))


class Mlp:
    """Two-layer perceptron; output layer optionally zero-initialized so the
    network starts as the identity-residual."""

    def __init__(self, n_in, n_hidden, n_out, rng, zero_out=True, prefix="mlp"):
        self.w1, self.b1 = _linear(rng, n_in, n_hidden)
        self.w2, self.b2 = _linear(rng, n_hidden, n_out, zero=zero_out)
        self.prefix = prefix

    def parameters(self):
        return {f"{self.prefix}.w1": self.w1, f"{self.prefix}.b1": self.b1,
                f"{self.prefix}.w2": self.w2, f"{self.prefix}.b2": self.b2}

    def __call__(self, x):
        h = torch.nn.functional.softplus(x @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2


@dataclass
class FieldBounds:
    lo: np.ndarray
    hi: np.ndarray

    @staticmethod
    def around(points, margin=0.25):
        pts = np.asarray(points)
        return FieldBounds(pts.min(axis=0) - margin, pts.max(axis=0) + margin)

    def contains(self, x):
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


class CoarseField:
    """Residual density + color field over a body-SDF prior."""

    ALPHA = 0.001

    def __init__(self, bounds: FieldBounds, body_sdf, seed=0,
                 n_levels=8, table_size=2 ** 19):
        """body_sdf: callable mapping (N,3) numpy -> (N,) signed distance."""
        self.bounds = bounds
        self.body_sdf = body_sdf
        rng = np.random.default_rng(seed)
        self.encoder = GridEncoder(bounds.lo, bounds.hi, n_levels=n_levels,
                                   table_size=table_size, rng=rng)
        self.decoder = Mlp(self.encoder.out_dim, 64, 4, rng, zero_out=True,
                           prefix="decoder")

    def parameters(self):
        p = {}
        p.update(self.encoder.parameters())
        p.update(self.decoder.parameters())
        return p

    def clone(self):
        """Fresh field with independently trainable copies of all weights;
        used to seed the fine-stage color net from the coarse one."""
        other = CoarseField(self.bounds, self.body_sdf,
                            n_levels=self.encoder.n_levels,
                            table_size=self.encoder.table_size)
        src = self.parameters()
        for name, p in other.parameters().items():
            with torch.no_grad():
                p.copy_(src[name])
        return other

    # -- raw heads ---------------------------------------------------------

    def decode(self, x_t):
        out = self.decoder(self.encoder(x_t))
        dsigma = out[:, 0]
        rgb = torch.sigmoid(out[:, 1:4])
        return dsigma, rgb

    def base_density(self, d):
        """tau from the body SDF value; peaks at 1/(2 alpha) on the surface."""
        d_t = torch.as_tensor(d, dtype=DTYPE)
        return torch.sigmoid(-d_t / self.ALPHA) / self.ALPHA

    def density(self, x, body_d=None):
        """sigma at canonical points (torch tensor in, torch tensor out).
        Out-of-bounds points get density 0."""
        x_t = torch.as_tensor(x, dtype=DTYPE)
        if body_d is None:
            body_d = self.body_sdf(x_t.detach().cpu().numpy())
        tau = self.base_density(body_d)
        dsigma, _ = self.decode(x_t)
        sigma = torch.clamp(tau + dsigma, min=0.0)
        inside = torch.as_tensor(
            self.bounds.contains(x_t.detach().cpu().numpy()), dtype=DTYPE)
        return sigma * inside

    def color(self, x):
        x_t = torch.as_tensor(x, dtype=DTYPE)
        _, rgb = self.decode(x_t)
        return rgb

    def normal(self, x, step=1e-3):
        """-grad sigma / |grad sigma| by central differences; falls back to
        the body SDF gradient where the density gradient degenerates."""
        x_np = np.atleast_2d(np.asarray(x, dtype=np.float64))
        grad = np.zeros_like(x_np)
        for k in range(3):
            e = np.zeros(3)
            e[k] = step
            sp = self.density(torch.tensor(x_np + e, dtype=DTYPE)).detach().numpy()
            sm = self.density(torch.tensor(x_np - e, dtype=DTYPE)).detach().numpy()
            grad[:, k] = (sp - sm) / (2 * step)
        n = -grad
        norm = np.linalg.norm(n, axis=1)
        bad = norm < 1e-8
        if np.any(bad):
            for k in range(3):
                e = np.zeros(3)
                e[k] = step
                dp = self.body_sdf(x_np[bad] + e)
                dm = self.body_sdf(x_np[bad] - e)
                grad[bad, k] = (dp - dm) / (2 * step)
            n[bad] = grad[bad]  # SDF gradient already points outward
            norm = np.linalg.norm(n, axis=1)
        return n / np.maximum(norm[:, None], 1e-30)


class OccupancyGrid:
    """Boolean lattice over the field bounds with a decayed density cache.
    Cells whose center is within `guard` of the body surface never prune."""

    DECAY = 0.95
    THRESHOLD_FRAC = 0.01

    def __init__(self, bounds: FieldBounds, body_sdf=None, resolution=64,
                 guard=0.05):
        self.bounds = bounds
        self.res = resolution
        self.cache = np.zeros((resolution,) * 3)
        axes = [np.linspace(bounds.lo[k], bounds.hi[k], resolution,
                            endpoint=False) for k in range(3)]
        step = (bounds.hi - bounds.lo) / resolution
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([gx, gy, gz], axis=-1) + 0.5 * step
        self.cell_size = step
        if body_sdf is not None:
            d = body_sdf(self.centers.reshape(-1, 3)).reshape(self.cache.shape)
            self.near_body = np.abs(d) < guard
        else:
            self.near_body = np.zeros(self.cache.shape, dtype=bool)
        self.threshold = self.THRESHOLD_FRAC * 0.5 / CoarseField.ALPHA

    @property
    def occupied(self):
        return (self.cache > self.threshold) | self.near_body

    def update(self, density_fn, rng):
        """Refresh the cache from one jittered sample per cell."""
        jitter = rng.uniform(-0.5, 0.5, size=self.centers.shape)
        pts = self.centers + jitter * self.cell_size
        with torch.no_grad():
            sigma = density_fn(torch.tensor(pts.reshape(-1, 3), dtype=DTYPE))
        sigma = sigma.numpy().reshape(self.cache.shape)
        self.cache = np.maximum(self.DECAY * self.cache, sigma)

    def lookup(self, points):
        """Occupancy of the cells containing the given points; out-of-bounds
        points report unoccupied."""
        u = (points - self.bounds.lo) / (self.bounds.hi - self.bounds.lo)
        inside = np.all((u >= 0) & (u < 1), axis=-1)
        ijk = np.clip((u * self.res).astype(np.int64), 0, self.res - 1)
        occ = self.occupied[ijk[..., 0], ijk[..., 1], ijk[..., 2]]
        return occ & inside


# ---------------------------------------------------------------------------
# checkpoint container: magic "AVSC", u32 version, named f32 sections


def save_checkpoint(path, params: dict):
    with open(path, "wb") as f:
        f.write(b"AVSC")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            t = params[name]
            arr = (t.detach().cpu().numpy() if isinstance(t, torch.Tensor)
                   else np.asarray(t)).astype("<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != b"AVSC":
            raise ValueError("not an AVSC checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(n):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out


def load_params_into(params: dict, sections: dict):
    for name, t in params.items():
        with torch.no_grad():
            t.copy_(torch.tensor(sections[name], dtype=DTYPE))
