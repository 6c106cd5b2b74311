"""Command-line entry points: avatar generation, animation, DensePose
condition rendering, PSNR evaluation and mesh export."""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
import numpy as np
import torch

from .body import BodyModel, Pose, PosedBody, generate_template, load_model, load_motion
from .cameras import CameraSpec
from .field import DTYPE, CoarseField, FieldBounds, load_checkpoint, load_params_into
from .guidance import RemoteScoreModel
from .metrics import psnr
from .raster import rasterize, render_densepose, save_iuv_png16, save_png, load_png
from .tet import (CoarseSdfSampler, SurfaceMesh, TetGrid, export_obj,
                  export_ply, load_ply, marching_tets, surface_color)
from .trainer import (PromptSpec, TrainConfig, Trainer, desk_config,
                      make_mock_guidance)

ENDPOINT_ENV = "AVATAR_GUIDANCE_ENDPOINT"


def _load_body(model_path) -> BodyModel:
    if model_path is None:
        return generate_template(1)
    return load_model(model_path)


def _camera_options(fn):
    for opt in reversed([
        click.option("--radius", default=1.7, show_default=True),
        click.option("--elevation", default=10.0, show_default=True),
        click.option("--azimuth", default=30.0, show_default=True),
        click.option("--fov", default=60.0, show_default=True),
        click.option("--size", default=256, show_default=True,
                     help="square image side in pixels"),
    ]):
        fn = opt(fn)
    return fn


def _camera(body, radius, elevation, azimuth, fov, size) -> CameraSpec:
    return CameraSpec(radius=radius, elevation=elevation, azimuth=azimuth,
                      fov=fov, width=size, height=size,
                      look_at=tuple(body.centroid))


@click.group()
def main():
    """Text-to-3D-avatar toolkit."""


@main.command()
@click.option("--prompt", required=True, help="avatar description")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="TrainConfig JSON; defaults to the desk-scale config")
@click.option("--guidance", type=click.Choice(["mock", "remote"]),
              default="mock", show_default=True)
@click.option("--endpoint", default=None,
              help=f"predict_noise service URL (overridden by "
                   f"${ENDPOINT_ENV})")
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="body model JSON; defaults to the built-in template")
@click.option("--out", "out_dir", required=True, type=click.Path())
def generate(prompt, config_path, guidance, endpoint, model_path, out_dir):
    """Optimize an avatar for a text prompt."""
    config = (TrainConfig.from_json(config_path) if config_path
              else desk_config())
    body = _load_body(model_path)
    if guidance == "mock":
        score_model = make_mock_guidance(body)
    else:
        endpoint = os.environ.get(ENDPOINT_ENV) or endpoint
        if not endpoint:
            raise click.UsageError(
                f"remote guidance needs --endpoint or ${ENDPOINT_ENV}")
        score_model = RemoteScoreModel(endpoint)
    artifacts = Trainer(config, PromptSpec(prompt), score_model, body,
                        out_dir).run()
    click.echo(f"avatar mesh: {artifacts.mesh_path}")
    click.echo(f"metrics log: {artifacts.metrics_path}")


@main.command()
@click.option("--mesh", "mesh_path", required=True,
              type=click.Path(exists=True), help="canonical avatar PLY")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True), help="body model JSON")
@click.option("--motion", "motion_path", required=True,
              type=click.Path(exists=True), help="pose-sequence JSON")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--render", "do_render", is_flag=True,
              help="also rasterize each frame to PNG")
@_camera_options
def animate(mesh_path, model_path, motion_path, out_dir, do_render,
            radius, elevation, azimuth, fov, size):
    """Repose a canonical avatar mesh along a motion sequence."""
    from scipy.spatial import cKDTree

    mesh = load_ply(mesh_path)
    body = load_model(model_path)
    fps, frames = load_motion(motion_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, idx = cKDTree(body.vertices).query(mesh.verts_np)
    camera = _camera(body, radius, elevation, azimuth, fov, size)

    for k, pose in enumerate(frames):
        posed = PosedBody(body, pose)
        M = posed.blend_matrices(idx)
        verts = (np.einsum("pab,pb->pa", M[:, :3, :3], mesh.verts_np)
                 + M[:, :3, 3])
        frame = SurfaceMesh(verts=torch.tensor(verts, dtype=DTYPE),
                            faces=mesh.faces, colors=mesh.colors)
        export_ply(frame, out / f"frame_{k:04d}.ply")
        if do_render:
            gb = rasterize(frame, camera)
            img = np.full((size, size, 3), 0.5)
            covered = gb.mask
            if covered.any() and mesh.colors is not None:
                tri = np.asarray(mesh.faces)[gb.face[covered]]
                img[covered] = np.einsum("pk,pkc->pc", gb.bary[covered],
                                         np.asarray(mesh.colors)[tri])
            save_png(out / f"frame_{k:04d}.png", img)
    with open(out / "animation.json", "w") as f:
        json.dump({"fps": fps, "frames": len(frames)}, f)
    click.echo(f"{len(frames)} frames at {fps} fps -> {out}")


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True), help="body model JSON")
@click.option("--pose-file", "pose_path", type=click.Path(exists=True),
              help='pose JSON {"rot": (J,3), "trans": (3,)}; default rest')
@click.option("--out", "out_path", required=True, type=click.Path())
@_camera_options
def densepose(model_path, pose_path, out_path, radius, elevation, azimuth,
              fov, size):
    """Render the 16-bit DensePose-style IUV condition map of a pose."""
    body = load_model(model_path)
    if pose_path is None:
        pose = Pose.rest(body.n_joints)
    else:
        with open(pose_path) as f:
            doc = json.load(f)
        rot = np.asarray(doc["rot"], dtype=np.float64)
        pose = Pose(rot, np.asarray(doc.get("trans", [0, 0, 0]),
                                    dtype=np.float64), np.ones(rot.shape[0]))
    camera = _camera(body, radius, elevation, azimuth, fov, size)
    iuv, _ = render_densepose(body, pose, camera)
    save_iuv_png16(out_path, iuv)
    click.echo(f"wrote {out_path}")


@main.command("eval-psnr")
@click.option("--a", "path_a", required=True, type=click.Path(exists=True))
@click.option("--b", "path_b", required=True, type=click.Path(exists=True))
def eval_psnr(path_a, path_b):
    """PSNR between two PNG images."""
    value = psnr(load_png(path_a), load_png(path_b))
    click.echo(f"PSNR: {value:.2f} dB")
    click.echo(json.dumps({"psnr_db": value}))


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True),
              help="fine.ckpt from a training run directory")
@click.option("--format", "fmt", type=click.Choice(["ply", "obj"]),
              default="ply", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def export(ckpt_path, fmt, out_path):
    """Extract the textured surface from a fine-stage checkpoint."""
    ckpt_path = Path(ckpt_path)
    run_dir = ckpt_path.parent
    meta_path = run_dir / "fine_meta.json"
    surface_path = run_dir / "coarse_surface.ply"
    if not meta_path.exists() or not surface_path.exists():
        raise click.UsageError(
            "export needs fine_meta.json and coarse_surface.ply next to "
            "the checkpoint")
    with open(meta_path) as f:
        meta = json.load(f)

    surface = load_ply(surface_path)
    sampler = CoarseSdfSampler(surface.verts_np, surface.faces)
    grid = TetGrid(meta["tet_lo"], meta["tet_hi"],
                   resolution=meta["tet_res"])
    bounds = FieldBounds(np.asarray(meta["bounds_lo"]),
                         np.asarray(meta["bounds_hi"]))
    color_field = CoarseField(bounds, lambda pts: np.zeros(len(pts)))

    sections = load_checkpoint(ckpt_path)
    params = dict(color_field.parameters())
    params.update(grid.parameters())
    load_params_into(params, {k: v for k, v in sections.items()
                              if k in params})
    with torch.no_grad():
        mesh = marching_tets(grid, sampler)
        colors = surface_color(color_field, mesh)
    if fmt == "ply":
        export_ply(mesh, out_path, colors=colors.numpy())
    else:
        export_obj(mesh, out_path)
    click.echo(f"wrote {out_path} ({mesh.n_verts} vertices)")


if __name__ == "__main__":
    main()
