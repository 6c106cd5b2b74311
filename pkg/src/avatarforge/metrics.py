"""Desk-scale evaluation: PSNR against oracle targets, dense part-IoU as a
pose-control proxy, mesh topology audits."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0,1] images; identical images cap at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def densepose_part_iou(pred, ref, n_parts=24) -> dict:
    """Per-part intersection over union of the part masks; parts empty in
    both images count as 1."""
    p = np.asarray(pred.part if hasattr(pred, "part") else pred)
    r = np.asarray(ref.part if hasattr(ref, "part") else ref)
    if p.shape != r.shape:
        raise ValueError("densepose_part_iou: shape mismatch")
    out = {}
    for part in range(1, n_parts + 1):
        mp = p == part
        mr = r == part
        union = np.logical_or(mp, mr).sum()
        if union == 0:
            out[part] = 1.0
        else:
            out[part] = float(np.logical_and(mp, mr).sum() / union)
    return out


def mesh_audit(mesh) -> dict:
    """Boundary edges, non-manifold edges, degenerate faces, counts."""
    faces = np.asarray(mesh.faces)
    verts = mesh.verts_np if hasattr(mesh, "verts_np") else np.asarray(mesh.verts)
    if faces.size == 0:
        return {"boundary_edges": 0, "nonmanifold_edges": 0,
                "degenerate_faces": 0, "n_verts": int(verts.shape[0]),
                "n_faces": 0}
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                            faces[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    _, counts = np.unique(key, axis=0, return_counts=True)
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0],
                                    tri[:, 2] - tri[:, 0]), axis=1)
    return {
        "boundary_edges": int((counts == 1).sum()),
        "nonmanifold_edges": int((counts > 2).sum()),
        "degenerate_faces": int((area2 * 0.5 <= 1e-12).sum()),
        "n_verts": int(verts.shape[0]),
        "n_faces": int(faces.shape[0]),
    }


@dataclass
class EvalReport:
    psnr_per_view: dict = field(default_factory=dict)
    part_iou: dict = field(default_factory=dict)
    mesh_stats: dict = field(default_factory=dict)
    external_scores: dict = field(default_factory=dict)  # merged in later

    @property
    def mean_part_iou(self) -> float:
        if not self.part_iou:
            return float("nan")
        return float(np.mean(list(self.part_iou.values())))

    def to_dict(self):
        d = asdict(self)
        d["mean_part_iou"] = self.mean_part_iou
        return d
