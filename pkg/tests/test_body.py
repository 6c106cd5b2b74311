"""Body template, kinematics, skinning and part cameras."""

import json

import numpy as np
import pytest

from avatarforge.body import (DegeneratePoseError, PART_ZOOM, BodyModel,
                              Pose, PosedBody, axis_angle_matrix,
                              bone_transforms, deform_points,
                              generate_template, load_model, load_motion,
                              part_camera, save_model)
from avatarforge.cameras import CameraSpec, camera_from_spec, project


def test_template_joint_count(body_small):
    assert body_small.n_joints == 24


def test_template_vertex_count_golden(body_small, golden):
    assert body_small.vertices.shape[0] == golden["template_level0_verts"]
    assert body_small.faces.shape[0] == golden["template_level0_faces"]


def test_weights_rows_sum_to_one(body):
    sums = body.skin_weights.sum(axis=1)
    assert np.allclose(sums, 1.0, atol=1e-12)


def test_template_watertight(body_small):
    faces = body_small.faces
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                            faces[:, [2, 0]]])
    _, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_invalid_level():
    with pytest.raises(ValueError):
        generate_template(-1)
    with pytest.raises(ValueError):
        generate_template(4)


# -- kinematics --------------------------------------------------------


def test_rest_pose_identity(body_small):
    B = bone_transforms(body_small, Pose.rest()).world
    assert np.allclose(B, np.broadcast_to(np.eye(4), B.shape), atol=1e-12)


def test_two_joint_chain_hand_fk():
    # minimal model: root at origin, child at (0,1,0); rotate root 90 deg
    # about z -> posed child lands at (-1,0,0)
    model = BodyModel(
        vertices=np.zeros((1, 3)), faces=np.zeros((0, 3), dtype=np.int64),
        skin_weights=np.ones((1, 2)) * 0.5,
        joint_rest=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        parent=np.array([0, 0]), part_label=np.ones(1, dtype=np.int64),
        uv=np.zeros((1, 2)))
    rot = np.zeros((2, 3))
    rot[0, 2] = np.pi / 2
    B = bone_transforms(model, Pose(rot, np.zeros(3), np.ones(2))).world
    child = B[1, :3, :3] @ model.joint_rest[1] + B[1, :3, 3]
    assert np.allclose(child, [-1.0, 0.0, 0.0], atol=1e-12)


def test_root_translation_rigid(body_small):
    pose = Pose(np.zeros((24, 3)), np.array([0.0, 0.0, 0.5]), np.ones(24))
    B = bone_transforms(body_small, pose).world
    posed = np.einsum("jab,jb->ja", B[:, :3, :3], body_small.joint_rest) \
        + B[:, :3, 3]
    assert np.allclose(posed - body_small.joint_rest, [0.0, 0.0, 0.5],
                       atol=1e-12)


def test_axis_angle_matrix_oracle():
    R = axis_angle_matrix(np.array([[0.0, 0.0, np.pi / 2]]))[0]
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)


# -- skinning ----------------------------------------------------------


def test_deform_identity(body_small):
    T = bone_transforms(body_small, Pose.rest())
    out = deform_points(body_small.vertices, body_small.skin_weights, T)
    assert np.allclose(out, body_small.vertices, atol=1e-12)


def test_deform_hand_rotation():
    # weight 1 on a joint rotated 90 deg about z with pivot at origin
    model = BodyModel(
        vertices=np.array([[1.0, 0.0, 0.0]]),
        faces=np.zeros((0, 3), dtype=np.int64),
        skin_weights=np.array([[1.0]]),
        joint_rest=np.zeros((1, 3)), parent=np.array([0]),
        part_label=np.ones(1, dtype=np.int64), uv=np.zeros((1, 2)))
    pose = Pose(np.array([[0.0, 0.0, np.pi / 2]]), np.zeros(3), np.ones(1))
    T = bone_transforms(model, pose)
    out = deform_points(model.vertices, model.skin_weights, T)
    assert np.allclose(out[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_deform_blend_translation():
    model = BodyModel(
        vertices=np.array([[0.3, 0.4, 0.5]]),
        faces=np.zeros((0, 3), dtype=np.int64),
        skin_weights=np.array([[0.5, 0.5]]),
        joint_rest=np.zeros((2, 3)), parent=np.array([0, 0]),
        part_label=np.ones(1, dtype=np.int64), uv=np.zeros((1, 2)))
    pose = Pose(np.zeros((2, 3)), np.zeros(3), np.ones(2))
    T = bone_transforms(model, pose)
    world = T.world.copy()
    world[1, :3, 3] += [1.0, 0.0, 0.0]  # pure translation on joint 1
    out = deform_points(model.vertices, model.skin_weights,
                        type(T)(world=world))
    assert np.allclose(out[0], model.vertices[0] + [0.5, 0.0, 0.0],
                       atol=1e-12)


def test_weight_sum_validation(body_small):
    T = bone_transforms(body_small, Pose.rest())
    bad = body_small.skin_weights * 1.01
    with pytest.raises(ValueError):
        deform_points(body_small.vertices, bad, T)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.zeros((24, 3)), np.zeros(3), np.zeros(24))  # zero scale
    with pytest.raises(ValueError):
        Pose(np.full((24, 3), np.nan), np.zeros(3), np.ones(24))


# -- inverse skinning ---------------------------------------------------


def pose_library_sample(seed):
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-0.5, 0.5, size=(24, 3))
    return Pose(rot, rng.uniform(-0.2, 0.2, size=3), np.ones(24))


def test_inverse_identity(body_small):
    posed = PosedBody(body_small, Pose.rest())
    pts = np.random.default_rng(0).uniform(-0.3, 1.4, size=(50, 3))
    assert np.allclose(posed.inverse_deform(pts), pts, atol=1e-12)


def test_inverse_at_body_vertices(body_small):
    posed = PosedBody(body_small, pose_library_sample(1))
    back = posed.inverse_deform(posed.vertices[::11])
    assert np.max(np.abs(back - body_small.vertices[::11])) < 1e-6


def test_round_trip_near_surface(body_small):
    rng = np.random.default_rng(2)
    for seed in range(5):
        posed = PosedBody(body_small, pose_library_sample(seed + 10))
        base = posed.vertices[rng.integers(0, len(posed.vertices), 200)]
        pts = base + rng.normal(0.0, 0.01, size=base.shape)
        canon = posed.inverse_deform(pts)
        idx, _ = posed.nearest_vertex(pts)
        back = posed.forward_deform(canon, vertex_idx=idx)
        assert np.max(np.linalg.norm(back - pts, axis=1)) < 1e-6


def test_degenerate_pose_raises(body_small):
    posed = PosedBody(body_small, Pose.rest())
    posed.transforms.world[:, :3, :3] = 0.0
    posed.__dict__.pop("_capsules", None)
    with pytest.raises(DegeneratePoseError):
        posed.inverse_deform(np.array([[0.0, 0.9, 0.0]]))


def test_capsule_distance_tracks_sdf(body_small):
    posed = PosedBody(body_small, Pose.rest())
    pts = np.random.default_rng(3).uniform(-1, 2, size=(200, 3))
    approx = posed.capsule_distance(pts)
    exact = body_small.sdf.signed_distance(pts)
    # the capsules are the template's own primitives
    assert np.max(np.abs(approx - exact)) < 0.02


# -- part cameras --------------------------------------------------------


def test_part_camera_head(body_small):
    base = CameraSpec(radius=1.5, look_at=(0, 0, 0))
    cam = part_camera(body_small, Pose.rest(), "head", base)
    assert abs(cam.radius - 1.5 * PART_ZOOM["head"]) < 1e-12
    assert cam.radius == pytest.approx(0.45)
    assert np.allclose(cam.look_at, body_small.joint_rest[15], atol=1e-12)


def test_part_camera_centering(body_small):
    base = CameraSpec(radius=1.5, width=100, height=100)
    for part in PART_ZOOM:
        cam = part_camera(body_small, Pose.rest(), part, base)
        c2w, intr = camera_from_spec(cam)
        uv, depth = project(np.asarray(cam.look_at)[None], c2w, intr)
        assert depth[0] > 0
        assert abs(uv[0, 0] - 50.0) < 5.0  # central 10%
        assert abs(uv[0, 1] - 50.0) < 5.0


def test_part_camera_unknown(body_small):
    with pytest.raises(ValueError):
        part_camera(body_small, Pose.rest(), "tail", CameraSpec())


# -- serialization -------------------------------------------------------


def test_model_round_trip(body_small, tmp_path):
    path = tmp_path / "model.json"
    save_model(body_small, path)
    again = load_model(path)
    assert np.array_equal(again.vertices, body_small.vertices)
    assert np.array_equal(again.faces, body_small.faces)
    assert np.array_equal(again.skin_weights, body_small.skin_weights)
    assert np.array_equal(again.part_label, body_small.part_label)


def test_load_motion(tmp_path):
    doc = {"fps": 24.0,
           "frames": [{"rot": np.zeros((24, 3)).tolist(),
                       "trans": [0.0, 0.1, 0.0]} for _ in range(3)]}
    path = tmp_path / "motion.json"
    path.write_text(json.dumps(doc))
    fps, frames = load_motion(path)
    assert fps == 24.0
    assert len(frames) == 3
    assert np.allclose(frames[0].root_translation, [0.0, 0.1, 0.0])
