"""Training loop plumbing: prompts, iteration sampling, optimizer, config,
mock guidance targets and a miniature end-to-end run."""

import json

import numpy as np
import pytest
import torch

from avatarforge.body import PART_JOINTS, Pose
from avatarforge.cameras import CameraSpec
from avatarforge.field import DTYPE
from avatarforge.metrics import densepose_part_iou
from avatarforge.raster import render_densepose
from avatarforge.tet import SurfaceMesh, load_ply
from avatarforge.trainer import (PARTS, IterationContext, PromptSpec,
                                 TrainConfig, Trainer, adamw_step,
                                 coarse_resolution, desk_config,
                                 load_pose_library, make_mock_guidance,
                                 mesh_iuv, render_template,
                                 sample_iteration_context, template_colors,
                                 view_prompt)

SPEC = PromptSpec(name="a clown")


# -- prompts -----------------------------------------------------------------


def test_view_prompt_directions():
    def prompt(az, elev=10.0):
        cam = CameraSpec(azimuth=az, elevation=elev)
        return view_prompt(SPEC, cam)[0]

    assert prompt(0.0) == ("a clown, front view, high quality, 8k uhd, "
                           "realistic")
    assert "front view" in prompt(44.0)
    assert "side view" in prompt(45.0)
    assert "side view" in prompt(100.0)
    assert "back view" in prompt(180.0)
    assert "back view" in prompt(135.0)
    assert "back view" in prompt(220.0)
    assert "front view" in prompt(315.0)
    assert "overhead view" in prompt(0.0, elev=55.0)


def test_view_prompt_parts():
    cam = CameraSpec(azimuth=0.0, elevation=0.0)
    pos, neg = view_prompt(SPEC, cam, part="head")
    assert pos.startswith("The headshot of a clown, front view")
    assert neg == SPEC.negative
    pos, _ = view_prompt(SPEC, cam, part="left_arm")
    assert pos.startswith("The left arm of a clown")
    with pytest.raises(ValueError):
        view_prompt(SPEC, cam, part="elbow")


def test_prompt_spec_validation():
    with pytest.raises(ValueError):
        PromptSpec(name="")


# -- config ------------------------------------------------------------------


def test_config_paper_defaults():
    cfg = TrainConfig()
    assert cfg.coarse_steps == 10000 and cfg.fine_steps == 3000
    assert cfg.lr == 0.01 and cfg.weight_decay == 0.01
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.99)
    assert cfg.lambda_normal == cfg.lambda_laplacian == 10000.0
    assert cfg.coarse_res == 64 and cfg.coarse_res_high == 256
    assert cfg.coarse_res_switch == 5000 and cfg.fine_res == 512
    assert cfg.cfg_scale == 7.5 and cfg.rescale == 0.5
    assert cfg.part_sr_every == 3 and cfg.canonical_prob == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(radius_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(canonical_prob=1.5)
    with pytest.raises(ValueError):
        TrainConfig(coarse_steps=-1)


def test_config_json_round_trip(tmp_path):
    cfg = desk_config(seed=7, coarse_steps=12)
    path = tmp_path / "config.json"
    cfg.to_json(path)
    again = TrainConfig.from_json(path)
    assert again == cfg
    assert isinstance(again.radius_range, tuple)


def test_coarse_resolution_switch():
    cfg = TrainConfig()
    assert coarse_resolution(cfg, 0) == 64
    assert coarse_resolution(cfg, 4999) == 64
    assert coarse_resolution(cfg, 5000) == 256


# -- iteration sampling --------------------------------------------------


def test_pose_library_contents():
    lib = load_pose_library()
    assert len(lib) >= 20
    names = [n for n, _ in lib]
    assert len(set(names)) == len(names)
    for _, pose in lib:
        assert pose.joint_rot.shape == (24, 3)
        assert np.all(np.abs(pose.joint_rot) <= np.pi)


def test_iteration_context_ranges(body):
    cfg = desk_config()
    lib = load_pose_library()
    n_part = n_canon = 0
    for step in range(10000):
        rng = np.random.default_rng([0, 1, step, 0])
        ctx = sample_iteration_context(cfg, body, step, rng, lib)
        cam = ctx.camera
        if ctx.part is None:
            assert cfg.radius_range[0] <= cam.radius <= cfg.radius_range[1]
        else:
            assert step % cfg.part_sr_every == 0
            assert ctx.part in PARTS
            n_part += 1
        assert cfg.elevation_range[0] <= cam.elevation <= cfg.elevation_range[1]
        assert cfg.azimuth_range[0] <= cam.azimuth <= cfg.azimuth_range[1]
        assert cfg.fov_range[0] <= cam.fov <= cfg.fov_range[1]
        if ctx.space == "canonical":
            n_canon += 1
            assert np.all(ctx.pose.joint_rot == 0.0)
        else:
            assert np.all(np.abs(ctx.pose.joint_rot) <= np.pi)
    # part supersampling on every part_sr_every-th step
    assert n_part == 10000 // cfg.part_sr_every + 1
    # canonical coin is roughly fair
    assert 0.45 < n_canon / 10000 < 0.55


def test_iteration_context_deterministic(body):
    cfg = desk_config()
    lib = load_pose_library()
    a = sample_iteration_context(cfg, body, 5,
                                 np.random.default_rng([3, 1, 5, 0]), lib)
    b = sample_iteration_context(cfg, body, 5,
                                 np.random.default_rng([3, 1, 5, 0]), lib)
    assert a.space == b.space and a.part == b.part
    assert a.camera == b.camera
    assert np.array_equal(a.pose.joint_rot, b.pose.joint_rot)


def test_parts_cover_templates():
    assert set(PARTS) == set(PART_JOINTS)


# -- optimizer ---------------------------------------------------------------


def test_adamw_single_step_oracle():
    p = torch.tensor([1.0], dtype=DTYPE)
    g = torch.tensor([1.0], dtype=DTYPE)
    state = {}
    adamw_step({"p": p}, {"p": g}, state, lr=0.1, beta1=0.9, beta2=0.99,
               weight_decay=0.01, eps=1e-15)
    # bias-corrected m_hat = v_hat = 1 after one step with unit gradient
    assert float(p) == pytest.approx(1.0 * (1 - 0.1 * 0.01) - 0.1, abs=1e-12)


def test_adamw_two_steps_oracle():
    p = torch.tensor([1.0], dtype=DTYPE)
    g = torch.tensor([1.0], dtype=DTYPE)
    state = {}
    for _ in range(2):
        adamw_step({"p": p}, {"p": g.clone()}, state, lr=0.1, beta1=0.9,
                   beta2=0.99, weight_decay=0.01, eps=1e-15)
    expected = (1.0 * 0.999 - 0.1) * 0.999 - 0.1
    assert float(p) == pytest.approx(expected, abs=1e-12)
    assert state["p"]["t"] == 2


def test_adamw_none_gradient_keeps_state():
    p = torch.tensor([1.0], dtype=DTYPE)
    state = {}
    adamw_step({"p": p}, {"p": torch.tensor([1.0], dtype=DTYPE)}, state,
               lr=0.1, weight_decay=0.0)
    before = float(p)
    adamw_step({"p": p}, {}, state, lr=0.1, weight_decay=0.0)
    # momentum keeps moving the weight even with a missing gradient
    assert float(p) < before
    assert state["p"]["t"] == 2


# -- mock guidance target ------------------------------------------------


def test_template_colors_formula(body_small):
    colors = template_colors(body_small)
    assert colors.shape == (body_small.vertices.shape[0], 3)
    assert np.all((colors >= 0.1) & (colors <= 0.9))
    k = 17
    expected = [0.15 + 0.7 * body_small.part_label[k] / 24.0,
                0.25 + 0.5 * body_small.uv[k, 0],
                0.25 + 0.5 * body_small.uv[k, 1]]
    assert np.allclose(colors[k], expected, atol=1e-12)


def test_render_template_background(body_small):
    cam = CameraSpec(radius=1.8, width=48, height=48, look_at=(0, 0.8, 0))
    img = render_template(body_small, Pose.rest(), cam)
    assert img.shape == (48, 48, 3)
    corner = img[0, 0]
    assert np.allclose(corner, 0.5, atol=1e-12)  # gray field
    assert img.std() > 0.01  # the body is visible


def test_mock_guidance_pulls_to_target(body_small):
    guidance = make_mock_guidance(body_small)
    cam = CameraSpec(radius=1.8, width=32, height=32, look_at=(0, 0.8, 0))
    target = guidance.target_renderer(Pose.rest(), cam)
    from avatarforge.guidance import SCHEDULE, sds_pixel_gradient
    image = np.full_like(target, 0.25)
    t = 0.3
    grad, _ = sds_pixel_gradient(guidance, image, None, "p", 0, "coarse",
                                 cfg_scale=1.0, seed=5, t=t,
                                 view=(Pose.rest(), cam))
    ab = SCHEDULE.alpha_bar_at(t)
    scale = (1 - ab) * np.sqrt(ab) / np.sqrt(1 - ab)
    assert np.max(np.abs(grad - scale * (image - target))) < 1e-10


def test_mesh_iuv_matches_densepose(body_small):
    # the template itself, fed through the generated-mesh iuv path, must
    # reproduce the body's own densepose condition almost exactly
    cam = CameraSpec(radius=1.8, elevation=5.0, azimuth=30.0,
                     width=64, height=64, look_at=(0, 0.8, 0))
    mesh = SurfaceMesh(verts=torch.tensor(body_small.vertices, dtype=DTYPE),
                       faces=body_small.faces)
    pose = load_pose_library()[0][1]
    ours = mesh_iuv(body_small, mesh, pose, cam)
    ref, _ = render_densepose(body_small, pose, cam)
    iou = densepose_part_iou(ours, ref)
    present = [p for p in iou
               if (ref.part == p).sum() + (ours.part == p).sum() > 0]
    assert np.mean([iou[p] for p in present]) > 0.95


# -- miniature end-to-end run ---------------------------------------------


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    from avatarforge.body import generate_template
    body = generate_template(0)
    cfg = desk_config(coarse_steps=8, fine_steps=5, coarse_res=32,
                      n_samples=32, mc_res=48, tet_res=16, occupancy_res=32,
                      sdf_grid_res=48, fine_res=48, template_level=0,
                      probe_every=4, seed=3)
    out = tmp_path_factory.mktemp("mini_run")
    trainer = Trainer(cfg, SPEC, make_mock_guidance(body), body, out)
    artifacts = trainer.run()
    return cfg, out, artifacts


def test_mini_run_artifacts(mini_run):
    cfg, out, artifacts = mini_run
    for name in ("config.json", "manifest.json", "metrics.jsonl",
                 "timing.jsonl", "coarse.ckpt", "fine.ckpt",
                 "fine_meta.json", "coarse_surface.ply", "avatar.ply"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["complete"] is True
    assert manifest["stages"] == ["coarse", "fine", "export"]
    assert manifest["runtime_seconds"] > 0


def test_mini_run_metrics_stream(mini_run):
    cfg, out, _ = mini_run
    records = [json.loads(l) for l in
               (out / "metrics.jsonl").read_text().splitlines()]
    assert len(records) == cfg.coarse_steps + cfg.fine_steps
    stages = {r["stage"] for r in records}
    assert stages == {"coarse", "fine"}
    for r in records:
        assert 0.02 <= r["t"] <= 0.98
        assert r["skipped"] in (False, True)
    probes = [r for r in records if "probe_mse" in r]
    assert probes  # convergence monitoring is on


def test_mini_run_mesh_loadable(mini_run):
    _, _, artifacts = mini_run
    mesh = load_ply(artifacts.mesh_path)
    assert mesh.n_verts > 100
    assert mesh.colors is not None
    from avatarforge.metrics import mesh_audit
    audit = mesh_audit(mesh)
    assert audit["nonmanifold_edges"] == 0


def test_mini_run_config_round_trip(mini_run):
    cfg, out, _ = mini_run
    assert TrainConfig.from_json(out / "config.json") == cfg
