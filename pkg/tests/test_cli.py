"""CLI surface: generate, animate, densepose, eval-psnr, export."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from avatarforge.body import generate_template, save_model
from avatarforge.cli import main
from avatarforge.raster import save_png
from avatarforge.tet import load_ply
from avatarforge.trainer import desk_config

from test_raster import read_png16_rgb


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "body.json"
    save_model(generate_template(0), path)
    return path


@pytest.fixture(scope="module")
def generated(tmp_path_factory, model_path):
    base = tmp_path_factory.mktemp("gen")
    cfg = desk_config(coarse_steps=4, fine_steps=3, coarse_res=32,
                      n_samples=24, mc_res=48, tet_res=16, occupancy_res=32,
                      sdf_grid_res=48, fine_res=48, template_level=0, seed=1)
    cfg_path = base / "config.json"
    cfg.to_json(cfg_path)
    out = base / "run"
    result = CliRunner().invoke(main, [
        "generate", "--prompt", "a sample avatar", "--config", str(cfg_path),
        "--guidance", "mock", "--model", str(model_path),
        "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out, result


def test_generate_outputs(generated):
    out, result = generated
    assert "avatar mesh:" in result.output
    for name in ("avatar.ply", "fine.ckpt", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["complete"] is True


def test_generate_remote_needs_endpoint(model_path, tmp_path):
    result = CliRunner().invoke(main, [
        "generate", "--prompt", "x", "--guidance", "remote",
        "--model", str(model_path), "--out", str(tmp_path / "r")],
        env={"AVATAR_GUIDANCE_ENDPOINT": ""})
    assert result.exit_code != 0
    assert "endpoint" in result.output.lower()


def test_animate(generated, model_path, tmp_path):
    out, _ = generated
    motion = {"fps": 12.0,
              "frames": [{"rot": np.zeros((24, 3)).tolist(),
                          "trans": [0.0, 0.0, 0.01 * k]} for k in range(2)]}
    motion_path = tmp_path / "motion.json"
    motion_path.write_text(json.dumps(motion))
    anim_out = tmp_path / "anim"
    result = CliRunner().invoke(main, [
        "animate", "--mesh", str(out / "avatar.ply"),
        "--model", str(model_path), "--motion", str(motion_path),
        "--out", str(anim_out), "--render", "--size", "64"])
    assert result.exit_code == 0, result.output
    for k in range(2):
        assert (anim_out / f"frame_{k:04d}.ply").exists()
        assert (anim_out / f"frame_{k:04d}.png").exists()
    doc = json.loads((anim_out / "animation.json").read_text())
    assert doc == {"fps": 12.0, "frames": 2}
    # frame 1 is frame 0 rigidly shifted by the root translation
    f0 = load_ply(anim_out / "frame_0000.ply")
    f1 = load_ply(anim_out / "frame_0001.ply")
    shift = f1.verts_np - f0.verts_np
    assert np.allclose(shift, [0.0, 0.0, 0.01], atol=1e-5)


def test_densepose_command(model_path, tmp_path):
    out_path = tmp_path / "iuv.png"
    result = CliRunner().invoke(main, [
        "densepose", "--model", str(model_path), "--out", str(out_path),
        "--size", "48"])
    assert result.exit_code == 0, result.output
    arr = read_png16_rgb(out_path)
    assert arr.shape == (48, 48, 3)
    assert arr[..., 0].max() <= 24
    assert (arr[..., 0] > 0).sum() > 100


def test_eval_psnr_command(tmp_path):
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    save_png(tmp_path / "a.png", a)
    save_png(tmp_path / "b.png", b)
    result = CliRunner().invoke(main, [
        "eval-psnr", "--a", str(tmp_path / "a.png"),
        "--b", str(tmp_path / "b.png")])
    assert result.exit_code == 0, result.output
    assert result.output.startswith("PSNR: ")
    doc = json.loads(result.output.strip().splitlines()[-1])
    assert doc["psnr_db"] == pytest.approx(20.0, abs=0.2)


def test_export_command(generated, tmp_path):
    out, _ = generated
    ply_path = tmp_path / "re.ply"
    result = CliRunner().invoke(main, [
        "export", "--checkpoint", str(out / "fine.ckpt"),
        "--out", str(ply_path)])
    assert result.exit_code == 0, result.output
    rebuilt = load_ply(ply_path)
    original = load_ply(out / "avatar.ply")
    assert rebuilt.n_verts == original.n_verts
    assert np.allclose(rebuilt.verts_np, original.verts_np, atol=1e-4)

    obj_path = tmp_path / "re.obj"
    result = CliRunner().invoke(main, [
        "export", "--checkpoint", str(out / "fine.ckpt"),
        "--format", "obj", "--out", str(obj_path)])
    assert result.exit_code == 0, result.output
    assert obj_path.read_text().startswith("#") or \
        "v " in obj_path.read_text()


def test_export_missing_sidecars(generated, tmp_path):
    out, _ = generated
    lone = tmp_path / "fine.ckpt"
    lone.write_bytes((out / "fine.ckpt").read_bytes())
    result = CliRunner().invoke(main, [
        "export", "--checkpoint", str(lone), "--out", str(tmp_path / "x.ply")])
    assert result.exit_code != 0
    assert "fine_meta.json" in result.output
