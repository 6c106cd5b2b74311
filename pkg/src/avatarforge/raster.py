"""Software triangle rasterizer and dense body-part condition maps.

Coverage runs in a numba kernel, tile-parallel with a per-pixel z-test
(ties to the lower face index), perspective-correct barycentrics and the
top-left rule at pixel centers. Shading re-interpolates attributes in
torch so gradients reach the color net and, through the barycentrics,
the mesh vertices of covered pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit, prange

from .cameras import CameraSpec, camera_from_spec
from .field import DTYPE

TILE = 16
NEAR_CLIP = 1e-2


@dataclass
class GBuffer:
    face: np.ndarray    # (H, W) int64, -1 = background
    bary: np.ndarray    # (H, W, 3) perspective-correct
    depth: np.ndarray   # (H, W)
    canon: np.ndarray   # (H, W, 3) interpolated canonical coordinate

    @property
    def mask(self):
        return self.face >= 0


@dataclass
class IuvImage:
    part: np.ndarray  # (H, W) int, 0 = background
    u: np.ndarray     # (H, W) in [0, 1]
    v: np.ndarray     # (H, W) in [0, 1]

    @property
    def mask(self):
        return self.part > 0

    def visualization(self):
        """8-bit RGB packing (part/24, u, v)."""
        rgb = np.stack([self.part / 24.0, self.u, self.v], axis=-1)
        return (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    def channels(self):
        """float32 3-channel view used on the guidance wire."""
        return np.stack([self.part / 24.0, self.u, self.v],
                        axis=-1).astype(np.float32)


@njit(cache=True, parallel=True)
def _raster_tiles(sv, depth_v, tile_faces, tile_offsets, n_tx, width, height,
                  out_face, out_bary, out_depth):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // n_tx
        tx = tile % n_tx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        for fi in range(tile_offsets[tile], tile_offsets[tile + 1]):
            f = tile_faces[fi]
            ax, ay = sv[f, 0, 0], sv[f, 0, 1]
            bx, by = sv[f, 1, 0], sv[f, 1, 1]
            cx, cy = sv[f, 2, 0], sv[f, 2, 1]
            area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
            if area == 0.0:
                continue
            inv_area = 1.0 / area
            sgn = 1.0 if area > 0.0 else -1.0
            fx0 = max(x0, int(np.floor(min(ax, min(bx, cx)) - 0.5)))
            fx1 = min(x1 - 1, int(np.ceil(max(ax, max(bx, cx)))))
            fy0 = max(y0, int(np.floor(min(ay, min(by, cy)) - 0.5)))
            fy1 = min(y1 - 1, int(np.ceil(max(ay, max(by, cy)))))
            wa, wb, wc = depth_v[f, 0], depth_v[f, 1], depth_v[f, 2]
            for py in range(fy0, fy1 + 1):
                for px in range(fx0, fx1 + 1):
                    x = px + 0.5
                    y = py + 0.5
                    e0 = ((cx - bx) * (y - by) - (cy - by) * (x - bx)) * sgn
                    e1 = ((ax - cx) * (y - cy) - (ay - cy) * (x - cx)) * sgn
                    e2 = ((bx - ax) * (y - ay) - (by - ay) * (x - ax)) * sgn
                    ok = True
                    # top-left fill rule on zero edges
                    if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                        ok = False
                    else:
                        if e0 == 0.0 and not _top_left(bx, by, cx, cy, sgn):
                            ok = False
                        if e1 == 0.0 and not _top_left(cx, cy, ax, ay, sgn):
                            ok = False
                        if e2 == 0.0 and not _top_left(ax, ay, bx, by, sgn):
                            ok = False
                    if not ok:
                        continue
                    l0 = e0 * inv_area * sgn
                    l1 = e1 * inv_area * sgn
                    l2 = e2 * inv_area * sgn
                    denom = l0 / wa + l1 / wb + l2 / wc
                    if denom <= 0.0:
                        continue
                    z = 1.0 / denom
                    prev = out_depth[py, px]
                    if z < prev or (z == prev and f < out_face[py, px]):
                        out_depth[py, px] = z
                        out_face[py, px] = f
                        out_bary[py, px, 0] = (l0 / wa) * z
                        out_bary[py, px, 1] = (l1 / wb) * z
                        out_bary[py, px, 2] = (l2 / wc) * z


@njit(cache=True, inline="always")
def _top_left(x0, y0, x1, y1, sgn):
    # edge from (x0,y0) to (x1,y1) of a sign-corrected (CCW) triangle
    dx = (x1 - x0) * sgn
    dy = (y1 - y0) * sgn
    if dy < 0.0:
        return True          # left edge (points up in y-down raster space)
    return dy == 0.0 and dx < 0.0  # top edge


def _project_np(verts, c2w, intr):
    cam = (verts - c2w[:3, 3]) @ c2w[:3, :3]
    depth = -cam[:, 2]
    z = np.maximum(depth, 1e-12)
    px = intr[0, 0] * cam[:, 0] / z + intr[0, 2]
    py = -intr[1, 1] * cam[:, 1] / z + intr[1, 2]
    return np.stack([px, py], axis=-1), depth


def rasterize(mesh, camera: CameraSpec, width=None, height=None) -> GBuffer:
    """Z-buffered coverage with perspective-correct barycentrics."""
    width = width or camera.width
    height = height or camera.height
    c2w, intr = camera_from_spec(camera.with_(width=width, height=height))

    face = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    canon = np.zeros((height, width, 3))

    verts = mesh.verts_np
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if faces.shape[0] == 0:
        return GBuffer(face, bary, depth, canon)

    sv, dv = _project_np(verts, c2w, intr)
    keep = np.all(dv[faces] > NEAR_CLIP, axis=1)
    fidx = np.nonzero(keep)[0]
    if fidx.size == 0:
        return GBuffer(face, bary, depth, canon)

    tri = sv[faces[fidx]]                      # (F, 3, 2)
    lo = np.floor(tri.min(axis=1) / TILE).astype(np.int64)
    hi = np.floor((tri.max(axis=1)) / TILE).astype(np.int64)
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    lo = np.clip(lo, 0, [n_tx - 1, n_ty - 1])
    hi = np.clip(hi, 0, [n_tx - 1, n_ty - 1])

    spans_x = hi[:, 0] - lo[:, 0] + 1
    spans_y = hi[:, 1] - lo[:, 1] + 1
    tile_chunks, face_chunks = [], []
    for dy in range(int(spans_y.max())):
        for dx in range(int(spans_x.max())):
            m = (dx < spans_x) & (dy < spans_y)
            tile_chunks.append((lo[m, 1] + dy) * n_tx + lo[m, 0] + dx)
            face_chunks.append(fidx[m])
    tiles = np.concatenate(tile_chunks)
    flist = np.concatenate(face_chunks)
    order = np.lexsort((flist, tiles))  # faces ascending within each tile
    tiles, flist = tiles[order], flist[order]
    offsets = np.searchsorted(tiles, np.arange(n_tx * n_ty + 1))

    sv_f = np.ascontiguousarray(sv[faces])     # indexed by face id
    dv_f = np.ascontiguousarray(dv[faces])
    _raster_tiles(sv_f, dv_f, flist, offsets, n_tx, width, height,
                  face, bary, depth)

    covered = face >= 0
    if covered.any():
        can = mesh.canon
        can = (can.detach().cpu().numpy()
               if isinstance(can, torch.Tensor) else np.asarray(can))
        fids = face[covered]
        canon[covered] = np.einsum("pk,pkc->pc", bary[covered],
                                   can[faces[fids]])
    depth[~covered] = 0.0
    return GBuffer(face, bary, depth, canon)


def _project_torch(verts, c2w, intr):
    c2w_t = torch.as_tensor(c2w, dtype=DTYPE)
    cam = (verts - c2w_t[:3, 3]) @ c2w_t[:3, :3]
    depth = -cam[:, 2]
    z = torch.clamp(depth, min=1e-12)
    px = intr[0, 0] * cam[:, 0] / z + intr[0, 2]
    py = -intr[1, 1] * cam[:, 1] / z + intr[1, 2]
    return torch.stack([px, py], dim=-1), depth


def shade(gbuffer: GBuffer, mesh, color_field, background_rgb,
          camera: CameraSpec):
    """Color covered pixels from the canonical color field, composited over
    the given background image (torch (H, W, 3)). Barycentrics are
    recomputed differentiably so gradients also reach vertex positions."""
    H, W = gbuffer.face.shape
    covered = gbuffer.mask
    img = background_rgb
    if not covered.any():
        return img

    c2w, intr = camera_from_spec(camera.with_(width=W, height=H))
    verts = mesh.verts
    if not isinstance(verts, torch.Tensor):
        verts = torch.tensor(np.asarray(verts), dtype=DTYPE)
    sv, dv = _project_torch(verts, c2w, intr)

    fids = gbuffer.face[covered]
    tris = np.asarray(mesh.faces)[fids]                # (P, 3)
    py, px = np.nonzero(covered)
    pix = torch.tensor(np.stack([px + 0.5, py + 0.5], axis=-1), dtype=DTYPE)

    a, b, c = sv[tris[:, 0]], sv[tris[:, 1]], sv[tris[:, 2]]
    def edge(p, q, x):
        return ((q[:, 0] - p[:, 0]) * (x[:, 1] - p[:, 1])
                - (q[:, 1] - p[:, 1]) * (x[:, 0] - p[:, 0]))
    area = edge(a, b, c)
    area = torch.where(area.abs() < 1e-12, torch.full_like(area, 1e-12), area)
    l0 = edge(b, c, pix) / area
    l1 = edge(c, a, pix) / area
    l2 = edge(a, b, pix) / area
    w0, w1, w2 = dv[tris[:, 0]], dv[tris[:, 1]], dv[tris[:, 2]]
    denom = l0 / w0 + l1 / w1 + l2 / w2
    b0 = (l0 / w0) / denom
    b1 = (l1 / w1) / denom
    b2 = (l2 / w2) / denom

    canon = mesh.canon
    if not isinstance(canon, torch.Tensor):
        canon = torch.tensor(np.asarray(canon), dtype=DTYPE)
    canon_pix = (b0.unsqueeze(-1) * canon[tris[:, 0]]
                 + b1.unsqueeze(-1) * canon[tris[:, 1]]
                 + b2.unsqueeze(-1) * canon[tris[:, 2]])
    rgb = color_field.color(canon_pix)

    mask_t = torch.tensor(covered, dtype=torch.bool)
    img = img.masked_scatter(mask_t.unsqueeze(-1).expand_as(img), rgb.reshape(-1))
    return img


def render_densepose(body_model, pose, camera: CameraSpec, width=None,
                     height=None):
    """Dense part/uv condition map of the posed body, plus the g-buffer."""
    from .body import PosedBody
    from .tet import SurfaceMesh

    posed = PosedBody(body_model, pose)
    mesh = SurfaceMesh(verts=torch.tensor(posed.vertices, dtype=DTYPE),
                       faces=body_model.faces,
                       canon=torch.tensor(body_model.vertices, dtype=DTYPE))
    gb = rasterize(mesh, camera, width, height)
    return iuv_from_gbuffer(gb, body_model.faces, body_model.part_label,
                            body_model.uv), gb


def iuv_from_gbuffer(gb: GBuffer, faces, part_label, uv) -> IuvImage:
    H, W = gb.face.shape
    part = np.zeros((H, W), dtype=np.int64)
    u = np.zeros((H, W))
    v = np.zeros((H, W))
    covered = gb.mask
    if covered.any():
        fids = gb.face[covered]
        tri = np.asarray(faces)[fids]                  # (P, 3)
        labels = np.asarray(part_label)[tri]           # (P, 3)
        bary = gb.bary[covered]
        # face-majority label; full three-way ties fall to the dominant corner
        maj = np.where(labels[:, 0] == labels[:, 1], labels[:, 0],
                       np.where(labels[:, 1] == labels[:, 2], labels[:, 1],
                                np.where(labels[:, 0] == labels[:, 2],
                                         labels[:, 0],
                                         labels[np.arange(labels.shape[0]),
                                                np.argmax(bary, axis=1)])))
        part[covered] = maj
        uvv = np.asarray(uv)[tri]                      # (P, 3, 2)
        interp = np.einsum("pk,pkc->pc", bary, uvv)
        u[covered] = np.clip(interp[:, 0], 0.0, 1.0)
        v[covered] = np.clip(interp[:, 1], 0.0, 1.0)
    return IuvImage(part=part, u=u, v=v)


def save_png(path, image):
    """8-bit PNG from a float [0,1] (H,W,3) or (H,W) array / tensor."""
    from PIL import Image

    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path):
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr


def save_iuv_png16(path, iuv: IuvImage):
    """Raw 16-bit-per-channel RGB PNG: (part, u*65535, v*65535).
    Written directly (PIL has no 16-bit RGB mode)."""
    import struct
    import zlib

    arr = np.stack([iuv.part.astype(np.uint16),
                    (iuv.u * 65535.0 + 0.5).astype(np.uint16),
                    (iuv.v * 65535.0 + 0.5).astype(np.uint16)], axis=-1)
    h, w, _ = arr.shape
    raw = arr.astype(">u2").tobytes()
    stride = w * 6
    body = b"".join(b"\x00" + raw[y * stride:(y + 1) * stride]
                    for y in range(h))

    def chunk(tag, data):
        return (struct.pack(">I", len(data)) + tag + data
                + struct.pack(">I", zlib.crc32(tag + data)))

    with open(path, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n")
        f.write(chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)))
        f.write(chunk(b"IDAT", zlib.compress(body)))
        f.write(chunk(b"IEND", b""))
