"""Parametric articulated body: procedural template, forward kinematics,
forward/inverse linear blend skinning, body SDF and part cameras.

The template is a licensing-free capsule-limb humanoid with the standard
24-joint kinematic tree; a loader accepts externally converted real body
data in the same JSON schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy.spatial import cKDTree

from .cameras import CameraSpec
from .sdf import MeshSdf

N_JOINTS = 24

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot",
    "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
]

PARENTS = np.array([0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12,
                    13, 14, 16, 17, 18, 19, 20, 21])

# A-pose rest joints (meters, y-up, left = +x)
_REST_JOINTS = np.array([
    [0.00, 0.95, 0.00],   # pelvis
    [0.09, 0.91, 0.00],   # left_hip
    [-0.09, 0.91, 0.00],  # right_hip
    [0.00, 1.05, 0.00],   # spine1
    [0.10, 0.50, 0.00],   # left_knee
    [-0.10, 0.50, 0.00],  # right_knee
    [0.00, 1.15, 0.00],   # spine2
    [0.11, 0.08, 0.00],   # left_ankle
    [-0.11, 0.08, 0.00],  # right_ankle
    [0.00, 1.25, 0.00],   # spine3
    [0.12, 0.04, 0.11],   # left_foot
    [-0.12, 0.04, 0.11],  # right_foot
    [0.00, 1.40, 0.00],   # neck
    [0.06, 1.36, 0.00],   # left_collar
    [-0.06, 1.36, 0.00],  # right_collar
    [0.00, 1.55, 0.00],   # head
    [0.17, 1.38, 0.00],   # left_shoulder
    [-0.17, 1.38, 0.00],  # right_shoulder
    [0.34, 1.15, 0.00],   # left_elbow
    [-0.34, 1.15, 0.00],  # right_elbow
    [0.47, 0.94, 0.00],   # left_wrist
    [-0.47, 0.94, 0.00],  # right_wrist
    [0.53, 0.85, 0.00],   # left_hand
    [-0.53, 0.85, 0.00],  # right_hand
])

# capsule radius for the bone ending at each joint
_BONE_RADIUS = {
    1: 0.095, 2: 0.095, 3: 0.12, 4: 0.07, 5: 0.07, 6: 0.12, 7: 0.055,
    8: 0.055, 9: 0.115, 10: 0.045, 11: 0.045, 12: 0.055, 13: 0.075,
    14: 0.075, 15: 0.075, 16: 0.065, 17: 0.065, 18: 0.05, 19: 0.05,
    20: 0.04, 21: 0.04, 22: 0.035, 23: 0.035,
}

PART_JOINTS = {
    "head": [15],
    "left_hand": [20, 22],
    "right_hand": [21, 23],
    "upper_body": [3, 6, 9, 12, 13, 14, 16, 17],
    "lower_body": [0, 1, 2, 4, 5, 7, 8, 10, 11],
    "left_arm": [16, 18, 20],
    "right_arm": [17, 19, 21],
}

PART_ZOOM = {
    "head": 0.3, "left_hand": 0.25, "right_hand": 0.25,
    "upper_body": 0.5, "lower_body": 0.5, "left_arm": 0.5, "right_arm": 0.5,
}


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    joint_rot: np.ndarray                 # (J, 3) axis-angle
    root_translation: np.ndarray          # (3,)
    bone_scale: np.ndarray                # (J,) positive

    @staticmethod
    def rest(n_joints: int = N_JOINTS) -> "Pose":
        return Pose(np.zeros((n_joints, 3)), np.zeros(3), np.ones(n_joints))

    def __post_init__(self):
        object.__setattr__(self, "joint_rot",
                           np.asarray(self.joint_rot, dtype=np.float64))
        object.__setattr__(self, "root_translation",
                           np.asarray(self.root_translation, dtype=np.float64))
        object.__setattr__(self, "bone_scale",
                           np.asarray(self.bone_scale, dtype=np.float64))
        if np.any(self.bone_scale <= 0):
            raise ValueError("bone_scale must be positive")
        if not np.all(np.isfinite(self.joint_rot)):
            raise ValueError("joint_rot must be finite")


@dataclass(frozen=True)
class BoneTransforms:
    world: np.ndarray  # (J, 4, 4), canonical -> deformed per joint


@dataclass
class BodyModel:
    vertices: np.ndarray       # (V, 3)
    faces: np.ndarray          # (F, 3)
    skin_weights: np.ndarray   # (V, J), rows sum to 1
    joint_rest: np.ndarray     # (J, 3)
    parent: np.ndarray         # (J,)
    part_label: np.ndarray     # (V,), 1..J
    uv: np.ndarray             # (V, 2)
    _sdf: MeshSdf = field(default=None, repr=False, compare=False)

    @property
    def n_joints(self) -> int:
        return self.joint_rest.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def sdf(self) -> MeshSdf:
        if self._sdf is None:
            self._sdf = MeshSdf(self.vertices, self.faces)
        return self._sdf


def axis_angle_matrix(aa):
    """Rodrigues rotation for a batch of axis-angle vectors, (N, 3, 3)."""
    aa = np.atleast_2d(np.asarray(aa, dtype=np.float64))
    theta = np.linalg.norm(aa, axis=1)
    k = np.where(theta[:, None] > 1e-12, aa / np.maximum(theta[:, None], 1e-12), 0.0)
    K = np.zeros((aa.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.sin(theta)[:, None, None]
    c = np.cos(theta)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


# ---------------------------------------------------------------------------
# template generation


def _capsule(p0, p1, radius, n_seg, n_ring):
    """Closed capsule mesh from p0 to p1; returns (verts, faces, uv)."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    z = axis / length if length > 1e-9 else np.array([0.0, 1.0, 0.0])
    ref = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    # rings: bottom hemisphere (excluding pole), shaft, top hemisphere
    ring_defs = []  # (center along axis, ring radius, v coordinate)
    total_arc = np.pi * radius + length
    arc = 0.0
    for i in range(1, n_ring + 1):
        ang = 0.5 * np.pi * i / n_ring
        a = 0.5 * np.pi * i / n_ring * radius
        ring_defs.append((-radius * np.cos(ang), radius * np.sin(ang), a / total_arc))
    shaft_steps = 2
    for i in range(1, shaft_steps):
        t = length * i / shaft_steps
        ring_defs.append((t, radius, (0.5 * np.pi * radius + t) / total_arc))
    for i in range(0, n_ring):
        ang = 0.5 * np.pi * i / n_ring
        arcpos = 0.5 * np.pi * radius + length + ang * radius
        ring_defs.append((length + radius * np.sin(ang), radius * np.cos(ang),
                          arcpos / total_arc))

    verts = [p0 - radius * z]
    uv = [(0.0, 0.0)]
    for center, r, v in ring_defs:
        base = p0 + center * z
        for s in range(n_seg):
            ang = 2.0 * np.pi * s / n_seg
            verts.append(base + r * (np.cos(ang) * x + np.sin(ang) * y))
            uv.append((s / n_seg, v))
    verts.append(p1 + radius * z)
    uv.append((0.0, 1.0))

    faces = []
    top = len(verts) - 1
    for s in range(n_seg):
        faces.append((0, 1 + (s + 1) % n_seg, 1 + s))
    n_rings_total = len(ring_defs)
    for r in range(n_rings_total - 1):
        a0 = 1 + r * n_seg
        b0 = 1 + (r + 1) * n_seg
        for s in range(n_seg):
            s1 = (s + 1) % n_seg
            faces.append((a0 + s, a0 + s1, b0 + s))
            faces.append((a0 + s1, b0 + s1, b0 + s))
    last = 1 + (n_rings_total - 1) * n_seg
    for s in range(n_seg):
        faces.append((top, last + s, last + (s + 1) % n_seg))
    return np.array(verts), np.array(faces, dtype=np.int64), np.array(uv)


def _bone_segments(joint_rest, parent):
    """Per-joint influence segment: joint -> mean of children (or a short
    extension past the joint for leaves)."""
    j = joint_rest
    n = j.shape[0]
    children = [[] for _ in range(n)]
    for i in range(1, n):
        children[parent[i]].append(i)
    seg = np.zeros((n, 2, 3))
    for i in range(n):
        seg[i, 0] = j[i]
        if children[i]:
            seg[i, 1] = j[[*children[i]]].mean(axis=0)
        else:
            d = j[i] - j[parent[i]]
            seg[i, 1] = j[i] + 0.6 * d
    return seg


@njit(cache=True, parallel=True)
def _capsule_distance_kernel(points, seg_a, seg_b, radius):
    """min over capsules of (point-to-segment distance - radius)."""
    n = points.shape[0]
    m = seg_a.shape[0]
    out = np.empty(n)
    for i in prange(n):
        best = 1e30
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for s in range(m):
            ax, ay, az = seg_a[s, 0], seg_a[s, 1], seg_a[s, 2]
            bx = seg_b[s, 0] - ax
            by = seg_b[s, 1] - ay
            bz = seg_b[s, 2] - az
            denom = bx * bx + by * by + bz * bz
            if denom < 1e-12:
                t = 0.0
            else:
                t = ((px - ax) * bx + (py - ay) * by + (pz - az) * bz) / denom
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = px - (ax + t * bx)
            dy = py - (ay + t * by)
            dz = pz - (az + t * bz)
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - radius[s]
            if d < best:
                best = d
        out[i] = best
    return out


def _point_segment_dist(points, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def generate_template(level: int = 0) -> BodyModel:
    """Deterministic capsule-limb humanoid in A-pose with 24 joints."""
    if level < 0 or level > 3:
        raise ValueError("level must be in [0, 3]")
    n_seg = 8 * (level + 1)
    n_ring = 2 * (level + 1)

    all_v, all_f, all_uv = [], [], []
    offset = 0
    bones = [(int(PARENTS[i]), i, _BONE_RADIUS[i]) for i in range(1, N_JOINTS)]
    for pa, ch, radius in bones:
        v, f, uv = _capsule(_REST_JOINTS[pa], _REST_JOINTS[ch], radius,
                            n_seg, n_ring)
        all_v.append(v)
        all_f.append(f + offset)
        all_uv.append(uv)
        offset += v.shape[0]
    # skull above the head joint
    v, f, uv = _capsule(_REST_JOINTS[15], _REST_JOINTS[15] + [0.0, 0.10, 0.02],
                        0.095, n_seg, n_ring)
    all_v.append(v)
    all_f.append(f + offset)
    all_uv.append(uv)

    vertices = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    uv = np.concatenate(all_uv)

    seg = _bone_segments(_REST_JOINTS, PARENTS)
    dists = np.stack([_point_segment_dist(vertices, seg[i, 0], seg[i, 1])
                      for i in range(N_JOINTS)], axis=1)
    order = np.argsort(dists, axis=1, kind="stable")
    weights = np.zeros((vertices.shape[0], N_JOINTS))
    rows = np.arange(vertices.shape[0])
    for k in range(2):  # two nearest bone segments
        j = order[:, k]
        weights[rows, j] = 1.0 / (dists[rows, j] + 1e-4) ** 2
    weights /= weights.sum(axis=1, keepdims=True)

    part_label = np.argmax(weights, axis=1) + 1  # parts are 1-based

    return BodyModel(vertices=vertices, faces=faces, skin_weights=weights,
                     joint_rest=_REST_JOINTS.copy(), parent=PARENTS.copy(),
                     part_label=part_label, uv=uv)


# ---------------------------------------------------------------------------
# kinematics and skinning


def _chain_transforms(joint_rest, parent, rots, scales, root_translation):
    n = joint_rest.shape[0]
    G = np.zeros((n, 4, 4))
    R = axis_angle_matrix(rots)
    for i in range(n):
        local = np.eye(4)
        if i == 0:
            local[:3, 3] = joint_rest[0] + root_translation
        else:
            local[:3, 3] = joint_rest[i] - joint_rest[parent[i]]
        local[:3, :3] = R[i] * scales[i]
        G[i] = local if i == 0 else G[parent[i]] @ local
    return G


def bone_transforms(model: BodyModel, pose: Pose) -> BoneTransforms:
    """Per-joint canonical-to-deformed matrices B_i = G_i(pose) G_i(rest)^-1."""
    n = model.n_joints
    G = _chain_transforms(model.joint_rest, model.parent, pose.joint_rot,
                          pose.bone_scale, pose.root_translation)
    G_rest = _chain_transforms(model.joint_rest, model.parent,
                               np.zeros((n, 3)), np.ones(n), np.zeros(3))
    B = np.einsum("nij,njk->nik", G, np.linalg.inv(G_rest))
    return BoneTransforms(world=B)


def deform_points(points, weights, transforms: BoneTransforms):
    """Forward LBS: per-point blend of bone transforms."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    sums = w.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("skin weight rows must sum to 1")
    M = np.einsum("pj,jab->pab", w, transforms.world)
    return np.einsum("pab,pb->pa", M[:, :3, :3], pts) + M[:, :3, 3]


class PosedBody:
    """A body model posed by forward LBS, with cached deformed vertices and
    a nearest-vertex index for inverse skinning."""

    def __init__(self, model: BodyModel, pose: Pose):
        self.model = model
        self.pose = pose
        self.transforms = bone_transforms(model, pose)
        self.vertices = deform_points(model.vertices, model.skin_weights,
                                      self.transforms)
        self._tree = cKDTree(self.vertices)
        self._capsules = None

    def nearest_vertex(self, x_d):
        pts = np.atleast_2d(x_d)
        # lowest-index tie break: scan the two nearest for exact matches
        cand_d, cand_i = self._tree.query(pts, k=2)
        tie = np.abs(cand_d[:, 0] - cand_d[:, 1]) < 1e-12
        idx = np.where(tie, np.minimum(cand_i[:, 0], cand_i[:, 1]),
                       cand_i[:, 0])
        return idx, cand_d[:, 0]

    def capsule_distance(self, x_d):
        """Fast approximate distance to the posed body surface from the
        bone capsules; used to prune ray samples before inverse skinning."""
        if self._capsules is None:
            B = self.transforms.world
            rest = self.model.joint_rest
            posed = np.einsum("jab,jb->ja", B[:, :3, :3], rest) + B[:, :3, 3]
            n = rest.shape[0]
            seg_a = [posed[self.model.parent[j]] for j in range(1, n)]
            seg_b = [posed[j] for j in range(1, n)]
            radius = [_BONE_RADIUS[j] for j in range(1, n)]
            # skull capsule, rigid with the head joint
            skull = rest[15] + np.array([0.0, 0.10, 0.02])
            seg_a.append(posed[15])
            seg_b.append(B[15, :3, :3] @ skull + B[15, :3, 3])
            radius.append(0.095)
            self._capsules = (np.ascontiguousarray(seg_a),
                              np.ascontiguousarray(seg_b),
                              np.ascontiguousarray(radius, dtype=np.float64))
        a, b, r = self._capsules
        pts = np.ascontiguousarray(np.atleast_2d(x_d), dtype=np.float64)
        return _capsule_distance_kernel(pts, a, b, r)

    def blend_matrices(self, vertex_idx):
        w = self.model.skin_weights[vertex_idx]
        return np.einsum("pj,jab->pab", w, self.transforms.world)

    def inverse_deform(self, x_d):
        """Map deformed-space points to canonical space via the nearest
        deformed body vertex's skinning weights."""
        pts = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
        idx, _ = self.nearest_vertex(pts)
        M = self.blend_matrices(idx)
        A = M[:, :3, :3]
        det = np.linalg.det(A)
        if np.any(np.abs(det) < 1e-12):
            raise DegeneratePoseError("singular blend transform")
        return np.linalg.solve(A, (pts - M[:, :3, 3])[..., None])[..., 0]

    def forward_deform(self, x_c, vertex_idx=None):
        pts = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
        if vertex_idx is None:
            # weights from the nearest *canonical* body vertex
            tree = cKDTree(self.model.vertices)
            _, vertex_idx = tree.query(pts)
        M = self.blend_matrices(vertex_idx)
        return np.einsum("pab,pb->pa", M[:, :3, :3], pts) + M[:, :3, 3]


def inverse_deform(x_d, model: BodyModel, pose: Pose):
    return PosedBody(model, pose).inverse_deform(x_d)


def signed_distance(model: BodyModel, x):
    """Body SDF in canonical space, negative inside."""
    return model.sdf.signed_distance(x)


def part_camera(model: BodyModel, pose: Pose, part: str,
                base: CameraSpec) -> CameraSpec:
    """Tight crop camera for one body part: target at the part's posed
    joint centroid, radius shrunk by the part's zoom factor."""
    if part not in PART_JOINTS:
        raise ValueError(f"unknown part {part!r}")
    B = bone_transforms(model, pose).world
    joints = PART_JOINTS[part]
    posed = np.einsum("jab,jb->ja", B[joints, :3, :3],
                      model.joint_rest[joints]) + B[joints, :3, 3]
    target = posed.mean(axis=0)
    return base.with_(look_at=tuple(target),
                      radius=base.radius * PART_ZOOM[part])


# ---------------------------------------------------------------------------
# serialization


def save_model(model: BodyModel, path):
    doc = {
        "vertices": model.vertices.tolist(),
        "faces": model.faces.tolist(),
        "weights": model.skin_weights.tolist(),
        "joints": model.joint_rest.tolist(),
        "parents": model.parent.tolist(),
        "parts": model.part_label.tolist(),
        "uv": model.uv.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> BodyModel:
    with open(path) as f:
        doc = json.load(f)
    return BodyModel(
        vertices=np.asarray(doc["vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        skin_weights=np.asarray(doc["weights"], dtype=np.float64),
        joint_rest=np.asarray(doc["joints"], dtype=np.float64),
        parent=np.asarray(doc["parents"], dtype=np.int64),
        part_label=np.asarray(doc["parts"], dtype=np.int64),
        uv=np.asarray(doc["uv"], dtype=np.float64),
    )


def load_motion(path):
    """Motion file: {"fps": float, "frames": [{"rot": (J,3), "trans": (3,)}]}."""
    with open(path) as f:
        doc = json.load(f)
    frames = [Pose(np.asarray(fr["rot"], dtype=np.float64),
                   np.asarray(fr["trans"], dtype=np.float64),
                   np.ones(len(fr["rot"]))) for fr in doc["frames"]]
    return float(doc["fps"]), frames
