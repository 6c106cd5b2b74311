"""Fine stage geometry: marching-cubes initialization from the coarse
field, deformable tetrahedral grid with a residual SDF, differentiable
marching tetrahedra, mesh regularizers, mesh export.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from itertools import permutations

import numpy as np
import torch
from skimage import measure

from .field import DTYPE, Mlp
from .sdf import MeshSdf, signed_distance_torch

ISO_LEVEL = 500.0  # = 1 / (2 alpha) at the body surface
OFFSET_CLAMP = 0.45  # fraction of cell size
RESIDUAL_CLAMP = 0.05  # meters; keeps the refined surface near the coarse one
RESIDUAL_SCALE = 0.001  # output gain; one optimizer step moves the surface mm
OFFSET_SCALE = 0.1      # same idea for the per-vertex lattice offsets

# standard marching-tets tables (sign code = sum over corners of (d>0)*2^i)
_TRI_TABLE = np.array([
    [-1, -1, -1, -1, -1, -1],
    [1, 0, 2, -1, -1, -1],
    [4, 0, 3, -1, -1, -1],
    [1, 4, 2, 1, 3, 4],
    [3, 1, 5, -1, -1, -1],
    [2, 3, 0, 2, 5, 3],
    [1, 4, 0, 1, 5, 4],
    [4, 2, 5, -1, -1, -1],
    [4, 5, 2, -1, -1, -1],
    [4, 1, 0, 4, 5, 1],
    [3, 2, 0, 3, 5, 2],
    [1, 3, 5, -1, -1, -1],
    [4, 1, 2, 4, 3, 1],
    [3, 0, 4, -1, -1, -1],
    [2, 0, 1, -1, -1, -1],
    [-1, -1, -1, -1, -1, -1]], dtype=np.int64)
_NUM_TRI = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0])
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


@dataclass
class SurfaceMesh:
    verts: torch.Tensor          # (V, 3) world/deformed positions
    faces: np.ndarray            # (F, 3)
    canon: torch.Tensor = None   # (V, 3) canonical coordinates
    colors: np.ndarray = None    # (V, 3) cached per-vertex rgb

    def __post_init__(self):
        if self.canon is None:
            self.canon = self.verts

    @property
    def verts_np(self):
        v = self.verts
        return v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)

    @property
    def n_verts(self):
        return int(self.verts.shape[0])


class CoarseSdfSampler:
    """Signed distance to the marching-cubes surface of the coarse stage."""

    def __init__(self, verts, faces):
        self.mesh = MeshSdf(verts, faces)

    def __call__(self, x):
        if isinstance(x, torch.Tensor):
            return signed_distance_torch(x, self.mesh)
        return self.mesh.signed_distance(x)


class TetGrid:
    """Deformable tetrahedral lattice: 6 tets per cube over a tight box,
    residual-SDF perceptron and per-vertex offsets bounded by tanh."""

    def __init__(self, lo, hi, resolution=64, seed=0):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.res = resolution
        self.cell_size = float(np.max((self.hi - self.lo) / resolution))

        n = resolution + 1
        axes = [np.linspace(self.lo[k], self.hi[k], n) for k in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        verts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        self.verts = torch.tensor(verts, dtype=DTYPE)
        self.tets = _cube_tets(resolution)

        rng = np.random.default_rng(seed)
        self.sdf_mlp = Mlp(3, 64, 1, rng, zero_out=True, prefix="residual_sdf")
        self.raw_offset = torch.zeros(verts.shape[0], 3, dtype=DTYPE,
                                      requires_grad=True)

    def parameters(self):
        p = dict(self.sdf_mlp.parameters())
        p["vert_offset"] = self.raw_offset
        return p

    def offsets(self):
        return (OFFSET_CLAMP * self.cell_size
                * torch.tanh(OFFSET_SCALE * self.raw_offset))

    def positions(self):
        return self.verts + self.offsets()

    def residual(self, x):
        # soft clamp: identity near zero, bounded so one optimizer step
        # cannot push the whole surface past the coarse SDF
        raw = RESIDUAL_SCALE * self.sdf_mlp(x)[:, 0]
        return RESIDUAL_CLAMP * torch.tanh(raw / RESIDUAL_CLAMP)


def _cube_tets(res):
    """6-tets-per-cube split of a res^3 cell lattice, positively oriented."""
    n = res + 1
    idx = np.arange(n ** 3).reshape(n, n, n)
    c = np.empty((res, res, res, 8), dtype=np.int64)
    for b, (di, dj, dk) in enumerate(
            [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]):
        c[..., b] = idx[di:res + di, dj:res + dj, dk:res + dk]
    corners = c.reshape(-1, 8)

    # Kuhn split: one tet per axis permutation along the main diagonal
    unit = np.eye(3, dtype=np.int64)
    locals_ = []
    for perm in sorted(permutations(range(3))):
        p = np.zeros((4, 3), dtype=np.int64)
        for k, ax in enumerate(perm):
            p[k + 1] = p[k] + unit[ax]
        det = np.linalg.det((p[1:] - p[0]).astype(np.float64))
        if det < 0:  # keep every tet positively oriented
            p[[2, 3]] = p[[3, 2]]
        locals_.append([int(v[0] * 4 + v[1] * 2 + v[2]) for v in p])
    return np.concatenate([corners[:, l] for l in locals_], axis=0)


def fine_sdf(grid: TetGrid, sampler: CoarseSdfSampler, x):
    """d_fine = d_coarse + residual, differentiable in the residual params
    and (through d_coarse) in x."""
    if not isinstance(x, torch.Tensor):
        x = torch.tensor(np.atleast_2d(x), dtype=DTYPE)
    return sampler(x) + grid.residual(x)


def init_from_coarse(coarse_field, occupancy, mc_res=128, tet_res=64,
                     margin=0.1, seed=0, chunk=65536):
    """Marching cubes on the coarse density at iso 1/(2 alpha), then a tet
    grid and coarse-SDF sampler built from the extracted surface."""
    if occupancy is not None and occupancy.occupied.any():
        occ = occupancy.occupied
        cells = np.argwhere(occ)
        lo = occupancy.bounds.lo + cells.min(axis=0) * occupancy.cell_size
        hi = occupancy.bounds.lo + (cells.max(axis=0) + 1) * occupancy.cell_size
    else:
        lo, hi = coarse_field.bounds.lo, coarse_field.bounds.hi
    lo = lo - margin
    hi = hi + margin

    axes = [np.linspace(lo[k], hi[k], mc_res) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0])
    with torch.no_grad():
        for s in range(0, pts.shape[0], chunk):
            x = torch.tensor(pts[s:s + chunk], dtype=DTYPE)
            vals[s:s + chunk] = coarse_field.density(x).numpy()
    vol = vals.reshape(mc_res, mc_res, mc_res)
    if vol.max() <= ISO_LEVEL or vol.min() >= ISO_LEVEL:
        raise RuntimeError("coarse stage produced no geometry")

    spacing = (hi - lo) / (mc_res - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=ISO_LEVEL,
                                                spacing=tuple(spacing))
    verts = verts + lo
    # density decreases outward, so skimage's gradient convention leaves the
    # faces wound inward for our use; flip so normals point to positive SDF
    faces = faces[:, ::-1].copy()
    sampler = CoarseSdfSampler(verts, faces)

    box_lo = verts.min(axis=0) - 0.05
    box_hi = verts.max(axis=0) + 0.05
    grid = TetGrid(box_lo, box_hi, resolution=tet_res, seed=seed)
    mesh = SurfaceMesh(verts=torch.tensor(verts, dtype=DTYPE),
                       faces=np.ascontiguousarray(faces))
    return mesh, sampler, grid


def marching_tets(grid: TetGrid, sampler: CoarseSdfSampler,
                  sdf_values: torch.Tensor = None) -> SurfaceMesh:
    """Differentiable zero-crossing extraction over the deformed lattice.
    Vertex v = (d_b p_a - d_a p_b) / (d_b - d_a) per crossing edge; faces are
    wound so normals point toward positive SDF.

    Topology is decided from a gradient-free full pass; the differentiable
    SDF is then re-evaluated only at crossing-edge endpoints."""
    pos = grid.positions()
    if sdf_values is None:
        with torch.no_grad():
            d_full = fine_sdf(grid, sampler, pos.detach())
    else:
        d_full = sdf_values.detach()
    d_full = torch.where(d_full == 0.0, d_full + 1e-10, d_full)

    with torch.no_grad():
        occ = (d_full > 0).numpy()
        tets = grid.tets
        occ4 = occ[tets]
        code = occ4 @ (1 << np.arange(4))
        inter = (code > 0) & (code < 15)
        if not inter.any():
            return SurfaceMesh(verts=torch.zeros(0, 3, dtype=DTYPE),
                               faces=np.zeros((0, 3), dtype=np.int64))
        tet_ids = np.nonzero(inter)[0]
        vtets = tets[tet_ids]
        code = code[tet_ids]

        edges = vtets[:, _TET_EDGES].reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        crossing = occ[uniq[:, 0]] != occ[uniq[:, 1]]
        new_index = np.full(uniq.shape[0], -1, dtype=np.int64)
        new_index[crossing] = np.arange(int(crossing.sum()))
        edge_of_tet = new_index[inv].reshape(-1, 6)

        ntri = _NUM_TRI[code]
        tri_rows = _TRI_TABLE[code]
        faces = []
        for t in range(tri_rows.shape[0]):
            for k in range(ntri[t]):
                faces.append(edge_of_tet[t, tri_rows[t, 3 * k:3 * k + 3]])
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        interp_edges = uniq[crossing]
        vids = np.unique(interp_edges)
        local = np.searchsorted(vids, interp_edges)

    if sdf_values is None:
        d_sel = fine_sdf(grid, sampler, pos[torch.from_numpy(vids)])
    else:
        d_sel = sdf_values[torch.from_numpy(vids)]
    d_sel = torch.where(d_sel == 0.0, d_sel + 1e-10, d_sel)

    pa = pos[interp_edges[:, 0]]
    pb = pos[interp_edges[:, 1]]
    da = d_sel[local[:, 0]].unsqueeze(-1)
    db = d_sel[local[:, 1]].unsqueeze(-1)
    verts = (db * pa - da * pb) / (db - da)
    return SurfaceMesh(verts=verts, faces=faces)


# ---------------------------------------------------------------------------
# regularizers


def laplacian_loss(mesh: SurfaceMesh) -> torch.Tensor:
    """Mean squared norm of the uniform Laplacian v_i - mean(neighbors)."""
    v = mesh.verts
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    i = torch.from_numpy(np.concatenate([edges[:, 0], edges[:, 1]]))
    j = torch.from_numpy(np.concatenate([edges[:, 1], edges[:, 0]]))
    nsum = torch.zeros_like(v).index_add_(0, i, v[j])
    deg = torch.zeros(v.shape[0], dtype=DTYPE).index_add_(
        0, i, torch.ones(i.shape[0], dtype=DTYPE))
    deg = torch.clamp(deg, min=1.0)
    delta = v - nsum / deg.unsqueeze(-1)
    return (delta ** 2).sum(dim=1).mean()


def face_normals(mesh: SurfaceMesh, eps=1e-12):
    v = mesh.verts
    f = mesh.faces
    n = torch.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]], dim=1)
    return n / torch.clamp(n.norm(dim=1, keepdim=True), min=eps)


def normal_consistency_loss(mesh: SurfaceMesh) -> torch.Tensor:
    """Mean (1 - cos angle) over face pairs sharing an edge."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    face_id = np.tile(np.arange(f.shape[0]), 3)
    key = np.sort(edges, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key = key[order]
    face_id = face_id[order]
    same = np.all(key[1:] == key[:-1], axis=1)
    a = face_id[:-1][same]
    b = face_id[1:][same]
    if a.size == 0:
        return torch.zeros((), dtype=DTYPE)
    n = face_normals(mesh)
    cos = (n[a] * n[b]).sum(dim=1)
    return (1.0 - cos).mean()


def surface_color(color_field, mesh: SurfaceMesh) -> torch.Tensor:
    """Per-vertex rgb from the canonical-space color net; lookups key on
    canonical coordinates so textures survive deformation."""
    canon = mesh.canon
    if not isinstance(canon, torch.Tensor):
        canon = torch.tensor(np.asarray(canon), dtype=DTYPE)
    return color_field.color(canon)


# ---------------------------------------------------------------------------
# export


def export_ply(mesh: SurfaceMesh, path, colors=None):
    """Binary little-endian PLY with optional per-vertex color."""
    v = mesh.verts_np.astype("<f4")
    f = np.asarray(mesh.faces, dtype=np.int32)
    if colors is None:
        colors = mesh.colors
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {v.shape[0]}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {f.shape[0]}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as out:
        out.write(("\n".join(header) + "\n").encode())
        if colors is not None:
            c8 = np.clip(np.asarray(colors) * 255.0, 0, 255).astype(np.uint8)
            rec = np.zeros(v.shape[0], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            rec["xyz"] = v
            rec["rgb"] = c8
            out.write(rec.tobytes())
        else:
            out.write(v.tobytes())
        frec = np.zeros(f.shape[0], dtype=[("n", "u1"), ("idx", "<i4", 3)])
        frec["n"] = 3
        frec["idx"] = f
        out.write(frec.tobytes())


def load_ply(path):
    """Reads the PLY files written by export_ply."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValueError("not a PLY file")
        nv = nf = 0
        has_color = False
        while True:
            line = fh.readline().strip()
            if line.startswith(b"element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith(b"element face"):
                nf = int(line.split()[-1])
            elif line.startswith(b"property uchar red"):
                has_color = True
            elif line == b"end_header":
                break
        if has_color:
            rec = np.frombuffer(fh.read(nv * 15),
                                dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            verts = rec["xyz"].astype(np.float64)
            colors = rec["rgb"].astype(np.float64) / 255.0
        else:
            verts = np.frombuffer(fh.read(nv * 12), dtype="<f4").reshape(-1, 3)
            verts = verts.astype(np.float64)
            colors = None
        frec = np.frombuffer(fh.read(nf * 13),
                             dtype=[("n", "u1"), ("idx", "<i4", 3)])
        faces = frec["idx"].astype(np.int64)
    mesh = SurfaceMesh(verts=torch.tensor(verts, dtype=DTYPE), faces=faces,
                       colors=colors)
    return mesh


def export_obj(mesh: SurfaceMesh, path):
    v = mesh.verts_np
    with open(path, "w") as out:
        for p in v:
            out.write(f"v {p[0]} {p[1]} {p[2]}\n")
        for f in np.asarray(mesh.faces) + 1:
            out.write(f"f {f[0]} {f[1]} {f[2]}\n")
