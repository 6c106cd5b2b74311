"""Coarse-to-fine score-distillation training loop.

Camera/pose/space sampling, part-aware super-resolution scheduling,
view-dependent prompts, AdamW updates, checkpoints and a JSON-lines
metrics log. The coarse stage optimizes the residual density field through
the volume renderer; the fine stage optimizes the tet-grid surface and a
cloned color net through the rasterizer, with mesh regularizers.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field as dc_field, asdict
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .body import (BodyModel, Pose, PosedBody, PART_JOINTS, part_camera)
from .cameras import CameraSpec, ray_grid
from .field import (CoarseField, FieldBounds, OccupancyGrid, DTYPE,
                    save_checkpoint)
from .guidance import (MockTargetGuidance, sample_timestep,
                       sds_pixel_gradient)
from .render import Background, render
from .raster import IuvImage, iuv_from_gbuffer, rasterize, render_densepose, shade
from .sdf import SdfGrid
from .tet import (SurfaceMesh, export_ply, init_from_coarse, laplacian_loss,
                  marching_tets, normal_consistency_loss, surface_color)

log = logging.getLogger(__name__)

PARTS = sorted(PART_JOINTS)
JITTER_SIGMA = 0.1   # radians, per joint-rotation component
JITTER_CLAMP = 0.3   # 3 sigma
ROT_LIMIT = np.pi    # axis-angle component limit after jitter
MAX_CONSECUTIVE_SKIPS = 50

_PART_TEMPLATES = {
    "head": "The headshot of {name}",
    "left_hand": "The left hand of {name}",
    "right_hand": "The right hand of {name}",
    "left_arm": "The left arm of {name}",
    "right_arm": "The right arm of {name}",
    "upper_body": "The upper body of {name}",
    "lower_body": "The lower body of {name}",
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    coarse_steps: int = 10000
    fine_steps: int = 3000
    batch: int = 1
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    adam_eps: float = 1e-15
    lambda_sds: float = 1.0
    lambda_normal: float = 10000.0
    lambda_laplacian: float = 10000.0
    coarse_res: int = 64
    coarse_res_high: int = 256
    coarse_res_switch: int = 5000
    fine_res: int = 512
    part_sr_every: int = 3
    canonical_prob: float = 0.5
    radius_range: tuple = (1.0, 2.0)
    elevation_range: tuple = (-10.0, 60.0)
    azimuth_range: tuple = (0.0, 360.0)
    fov_range: tuple = (55.0, 65.0)
    cfg_scale: float = 7.5
    rescale: float = 0.5
    seed: int = 0
    # renderer / data-structure knobs
    n_samples: int = 96
    anneal_steps: int = 8000
    occupancy_every: int = 16
    occupancy_res: int = 64
    mc_res: int = 128
    tet_res: int = 64
    sdf_grid_res: int = 128
    template_level: int = 1
    probe_every: int = 10

    def __post_init__(self):
        for name in ("radius_range", "elevation_range", "azimuth_range",
                     "fov_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be non-degenerate, got "
                                 f"({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.coarse_steps < 0 or self.fine_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not 0.0 <= self.canonical_prob <= 1.0:
            raise ValueError("canonical_prob must lie in [0, 1]")

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @staticmethod
    def from_json(path) -> "TrainConfig":
        with open(path) as f:
            doc = json.load(f)
        for key in ("radius_range", "elevation_range", "azimuth_range",
                    "fov_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return TrainConfig(**doc)


def desk_config(**overrides) -> TrainConfig:
    """Small CPU-friendly configuration used by the smoke/acceptance runs."""
    kw = dict(
        coarse_steps=500, fine_steps=300,
        coarse_res=64, coarse_res_switch=10 ** 9, fine_res=128,
        mc_res=96, tet_res=48, occupancy_res=48, sdf_grid_res=96,
        n_samples=96, cfg_scale=1.0, template_level=1,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class PromptSpec:
    name: str
    positive_suffix: str = "high quality, 8k uhd, realistic"
    negative: str = ("lowres, bad anatomy, bad hands, missing fingers, "
                     "worst quality, nsfw")

    def __post_init__(self):
        if not self.name:
            raise ValueError("prompt name must be non-empty")


def view_prompt(spec: PromptSpec, camera: CameraSpec, part=None):
    """View-dependent positive prompt and the unchanged negative prompt."""
    if part is not None:
        if part not in _PART_TEMPLATES:
            raise ValueError(f"unknown part {part!r}")
        base = _PART_TEMPLATES[part].format(name=spec.name)
    else:
        base = spec.name
    if camera.elevation >= 50.0:
        view = "overhead"
    else:
        az = (camera.azimuth + 180.0) % 360.0 - 180.0  # [-180, 180)
        if -45.0 <= az < 45.0:
            view = "front"
        elif az >= 135.0 or az < -135.0:
            view = "back"
        else:
            view = "side"
    positive = f"{base}, {view} view"
    if spec.positive_suffix:
        positive = f"{positive}, {spec.positive_suffix}"
    return positive, spec.negative


# ---------------------------------------------------------------------------
# iteration sampling


@dataclass
class IterationContext:
    space: str          # "canonical" | "deformed"
    pose: Pose
    camera: CameraSpec
    part: str = None


def load_pose_library():
    """Shipped pose library as (name, Pose) pairs."""
    path = resources.files("avatarforge").joinpath("data/poses.json")
    doc = json.loads(path.read_text())
    out = []
    for entry in doc["poses"]:
        rot = np.asarray(entry["rot"], dtype=np.float64)
        out.append((entry["name"],
                    Pose(rot, np.asarray(entry.get("trans", [0, 0, 0]),
                                         dtype=np.float64),
                         np.ones(rot.shape[0]))))
    return out


def _jittered(base: Pose, rng) -> Pose:
    jitter = np.clip(rng.normal(0.0, JITTER_SIGMA, size=base.joint_rot.shape),
                     -JITTER_CLAMP, JITTER_CLAMP)
    rot = np.clip(base.joint_rot + jitter, -ROT_LIMIT, ROT_LIMIT)
    return Pose(rot, base.root_translation, base.bone_scale)


def coarse_resolution(cfg: TrainConfig, step) -> int:
    """Rendering resolution schedule of the coarse stage."""
    return cfg.coarse_res if step < cfg.coarse_res_switch else cfg.coarse_res_high


def sample_iteration_context(cfg: TrainConfig, body: BodyModel, step, rng,
                             pose_library=None) -> IterationContext:
    """Space/pose/camera/part draw for one step; deterministic for a fixed
    rng state (the trainer derives one generator per (seed, stage, step))."""
    part = None
    if cfg.part_sr_every > 0 and step % cfg.part_sr_every == 0:
        part = PARTS[int(rng.integers(len(PARTS)))]

    if rng.uniform() < cfg.canonical_prob:
        space = "canonical"
        pose = Pose.rest(body.n_joints)
    else:
        space = "deformed"
        if pose_library:
            base = pose_library[int(rng.integers(len(pose_library)))][1]
        else:
            log.warning("empty pose library; deformed draw falls back to "
                        "a jittered rest pose")
            base = Pose.rest(body.n_joints)
        pose = _jittered(base, rng)

    camera = CameraSpec(
        radius=float(rng.uniform(*cfg.radius_range)),
        elevation=float(rng.uniform(*cfg.elevation_range)),
        azimuth=float(rng.uniform(*cfg.azimuth_range)),
        fov=float(rng.uniform(*cfg.fov_range)),
        look_at=tuple(body.centroid),
    )
    if part is not None:
        camera = part_camera(body, pose, part, camera)
    return IterationContext(space=space, pose=pose, camera=camera, part=part)


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(params: dict, grads: dict, state: dict, lr,
               beta1=0.9, beta2=0.99, weight_decay=0.01, eps=1e-15):
    """One decoupled-weight-decay Adam update with bias correction."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        st = state.setdefault(name, {"m": torch.zeros_like(p),
                                     "v": torch.zeros_like(p), "t": 0})
        st["t"] += 1
        st["m"].mul_(beta1).add_(g, alpha=1.0 - beta1)
        st["v"].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        with torch.no_grad():
            p.mul_(1.0 - lr * weight_decay)
            p.add_(m_hat / (v_hat.sqrt() + eps), alpha=-lr)
    return params


# ---------------------------------------------------------------------------
# mock guidance target: the textured template avatar


def template_colors(body: BodyModel) -> np.ndarray:
    """Procedural per-vertex texture keyed on part label and uv."""
    part = body.part_label / 24.0
    u, v = body.uv[:, 0], body.uv[:, 1]
    return np.stack([0.15 + 0.7 * part, 0.25 + 0.5 * u, 0.25 + 0.5 * v],
                    axis=-1)


def render_template(body: BodyModel, pose: Pose, camera: CameraSpec,
                    colors=None, background=0.5) -> np.ndarray:
    """Flat-shaded rasterization of the posed template over a gray field."""
    if colors is None:
        colors = template_colors(body)
    posed = PosedBody(body, pose)
    mesh = SurfaceMesh(verts=torch.tensor(posed.vertices, dtype=DTYPE),
                       faces=body.faces)
    gb = rasterize(mesh, camera)
    img = np.full((camera.height, camera.width, 3), float(background))
    covered = gb.mask
    if covered.any():
        tri = body.faces[gb.face[covered]]
        img[covered] = np.einsum("pk,pkc->pc", gb.bary[covered], colors[tri])
    return img


def make_mock_guidance(body: BodyModel) -> MockTargetGuidance:
    colors = template_colors(body)

    def target_renderer(pose, camera):
        return render_template(body, pose, camera, colors)

    return MockTargetGuidance(target_renderer)


def mesh_iuv(body: BodyModel, mesh: SurfaceMesh, pose: Pose,
             camera: CameraSpec) -> IuvImage:
    """DensePose-style condition map of a generated mesh: part labels and
    uv are transferred from the nearest canonical body vertex, then the
    posed mesh is rasterized."""
    tree = cKDTree(body.vertices)
    _, idx = tree.query(mesh.verts_np)
    posed = PosedBody(body, pose)
    M = posed.blend_matrices(idx)
    verts = np.einsum("pab,pb->pa", M[:, :3, :3], mesh.verts_np) + M[:, :3, 3]
    pm = SurfaceMesh(verts=torch.tensor(verts, dtype=DTYPE), faces=mesh.faces)
    gb = rasterize(pm, camera)
    return iuv_from_gbuffer(gb, mesh.faces, body.part_label[idx],
                            body.uv[idx])


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class RunArtifacts:
    out_dir: Path
    coarse_checkpoint: Path
    fine_checkpoint: Path
    mesh_path: Path
    metrics_path: Path
    mesh: SurfaceMesh = None
    colors: torch.Tensor = None


class TrainAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    _STAGE_ID = {"coarse": 1, "fine": 2}

    def __init__(self, config: TrainConfig, prompt: PromptSpec, guidance,
                 body: BodyModel, out_dir):
        self.cfg = config
        self.prompt = prompt
        self.guidance = guidance
        self.body = body
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        self.bounds = FieldBounds.around(body.vertices, margin=0.25)
        self.body_sdf = SdfGrid(body.sdf.signed_distance, self.bounds.lo,
                                self.bounds.hi, config.sdf_grid_res)
        self.field = CoarseField(self.bounds, self.body_sdf, seed=config.seed)
        self.occupancy = OccupancyGrid(self.bounds, body_sdf=self.body_sdf,
                                       resolution=config.occupancy_res)
        self.background = Background(np.random.default_rng(config.seed + 1))
        self.pose_library = load_pose_library()

        self.fine_field = None
        self.tet_grid = None
        self.sampler = None
        self._canon_tree = cKDTree(body.vertices)

        self.opt_state = {}
        self.skip_streak = 0
        self._metrics_f = None
        self._timing_f = None

        # fixed probe view for convergence monitoring under mock guidance
        self.probe_pose = Pose.rest(body.n_joints)
        self.probe_camera = CameraSpec(radius=1.6, elevation=10.0,
                                       azimuth=20.0, fov=60.0,
                                       width=64, height=64,
                                       look_at=tuple(body.centroid))
        self._probe_target = None
        if hasattr(guidance, "target_renderer"):
            self._probe_target = np.asarray(
                guidance.target_renderer(self.probe_pose, self.probe_camera))

    # -- bookkeeping ---------------------------------------------------

    def _rng(self, stage, step, tag):
        return np.random.default_rng(
            [self.cfg.seed, self._STAGE_ID[stage], step, tag])

    def _log_metrics(self, record):
        self._metrics_f.write(json.dumps(record, sort_keys=True) + "\n")

    def _log_timing(self, record):
        self._timing_f.write(json.dumps(record, sort_keys=True) + "\n")

    def _count_skip(self, stage, step, reason):
        self.skip_streak += 1
        log.warning("step %s/%d skipped: %s", stage, step, reason)
        if self.skip_streak > MAX_CONSECUTIVE_SKIPS:
            raise TrainAborted(
                f"more than {MAX_CONSECUTIVE_SKIPS} consecutive skipped "
                f"steps in the {stage} stage")

    def _apply(self, params, stage, step, extra_grad_check=()):
        """Collect gradients, guard non-finite values, run AdamW."""
        grads = {}
        finite = all(np.isfinite(np.asarray(x)).all()
                     for x in extra_grad_check)
        for name, p in params.items():
            g = p.grad
            grads[name] = None if g is None else g.clone()
            p.grad = None
            if g is not None and not torch.isfinite(g).all():
                finite = False
        if not finite:
            self._count_skip(stage, step, "non-finite gradient")
            return False
        cfg = self.cfg
        adamw_step(params, grads, self.opt_state, cfg.lr, cfg.beta1,
                   cfg.beta2, cfg.weight_decay, cfg.adam_eps)
        self.skip_streak = 0
        return True

    def _probe_mse(self):
        if self._probe_target is None:
            return None
        with torch.no_grad():
            img, _, _, _ = render(self.field, self.occupancy,
                                  self.background, self.probe_camera,
                                  n_samples=self.cfg.n_samples)
        return float(np.mean((img.numpy() - self._probe_target) ** 2))

    # -- coarse stage ----------------------------------------------------

    def coarse_params(self):
        params = dict(self.field.parameters())
        params.update(self.background.parameters())
        return params

    def coarse_step(self, step):
        cfg = self.cfg
        ctx = sample_iteration_context(cfg, self.body, step,
                                       self._rng("coarse", step, 0),
                                       self.pose_library)
        res = coarse_resolution(cfg, step)
        camera = ctx.camera.with_(width=res, height=res)
        posed = (None if ctx.space == "canonical"
                 else PosedBody(self.body, ctx.pose))

        img, _, _, _ = render(self.field, self.occupancy, self.background,
                              camera, posed=posed, n_samples=cfg.n_samples,
                              rng=self._rng("coarse", step, 1))
        condition, _ = render_densepose(self.body, ctx.pose, camera)
        positive, negative = view_prompt(self.prompt, camera, ctx.part)

        rng_sds = self._rng("coarse", step, 2)
        t = sample_timestep(step, "coarse", rng_sds, cfg.anneal_steps)
        grad_img, _ = sds_pixel_gradient(
            self.guidance, img.detach().numpy(), condition, positive, step,
            "coarse", cfg_scale=cfg.cfg_scale, rescale=cfg.rescale,
            rng=rng_sds, t=t, view=(ctx.pose, camera),
            negative_prompt=negative)

        params = self.coarse_params()
        surrogate = cfg.lambda_sds * (
            torch.tensor(grad_img, dtype=DTYPE) * img).sum()
        surrogate.backward()
        stepped = self._apply(params, "coarse", step,
                              extra_grad_check=(grad_img,))

        if cfg.occupancy_every > 0 and step % cfg.occupancy_every == 0:
            self.occupancy.update(self.field.density,
                                  self._rng("coarse", step, 3))

        record = {"stage": "coarse", "step": step, "t": t,
                  "space": ctx.space, "part": ctx.part, "res": res,
                  "grad_rms": float(np.sqrt(np.mean(grad_img ** 2))),
                  "skipped": not stepped}
        if cfg.probe_every > 0 and step % cfg.probe_every == 0:
            mse = self._probe_mse()
            if mse is not None:
                record["probe_mse"] = mse
        self._log_metrics(record)

    # -- fine stage ------------------------------------------------------

    def setup_fine(self):
        cfg = self.cfg
        _, self.sampler, self.tet_grid = init_from_coarse(
            self.field, self.occupancy, mc_res=cfg.mc_res,
            tet_res=cfg.tet_res, seed=cfg.seed)
        self.fine_field = self.field.clone()

        # first-order cache of d_coarse at the lattice: d(v + o) ~ d0 + g.o,
        # valid because offsets are bounded well below the surface curvature
        verts = self.tet_grid.verts.numpy()
        d0, closest, _ = self.sampler.mesh.signed_distance(
            verts, return_closest=True)
        safe = np.where(np.abs(d0) < 1e-12, 1e-12, d0)
        self._tet_d0 = torch.tensor(d0, dtype=DTYPE)
        self._tet_g = torch.tensor((verts - closest) / safe[:, None],
                                   dtype=DTYPE)
        # the residual only matters where it can flip the SDF sign
        from .tet import RESIDUAL_CLAMP, OFFSET_CLAMP
        margin = RESIDUAL_CLAMP + OFFSET_CLAMP * self.tet_grid.cell_size + 0.02
        self._tet_shell = torch.from_numpy(
            np.nonzero(np.abs(d0) < margin)[0])
        meta = {
            "bounds_lo": self.bounds.lo.tolist(),
            "bounds_hi": self.bounds.hi.tolist(),
            "tet_lo": self.tet_grid.lo.tolist(),
            "tet_hi": self.tet_grid.hi.tolist(),
            "tet_res": cfg.tet_res,
        }
        with open(self.out_dir / "fine_meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        export_ply(SurfaceMesh(
            verts=torch.tensor(self.sampler.mesh.vertices, dtype=DTYPE),
            faces=self.sampler.mesh.faces),
            self.out_dir / "coarse_surface.ply")

    def fine_params(self):
        params = dict(self.fine_field.parameters())
        params.update(self.tet_grid.parameters())
        params.update(self.background.parameters())
        return params

    def _pose_mesh(self, mesh: SurfaceMesh, pose: Pose) -> SurfaceMesh:
        """Forward-skin the canonical surface with nearest-body-vertex
        weights; differentiable in the canonical vertices."""
        posed = PosedBody(self.body, pose)
        _, idx = self._canon_tree.query(mesh.verts_np)
        M = posed.blend_matrices(idx)
        A = torch.tensor(M[:, :3, :3], dtype=DTYPE)
        b = torch.tensor(M[:, :3, 3], dtype=DTYPE)
        verts = torch.einsum("pab,pb->pa", A, mesh.verts) + b
        return SurfaceMesh(verts=verts, faces=mesh.faces, canon=mesh.verts)

    def fine_step(self, step):
        cfg = self.cfg
        ctx = sample_iteration_context(cfg, self.body, step,
                                       self._rng("fine", step, 0),
                                       self.pose_library)
        camera = ctx.camera.with_(width=cfg.fine_res, height=cfg.fine_res)

        offsets = self.tet_grid.offsets()
        d = self._tet_d0 + (self._tet_g * offsets).sum(dim=1)
        shell = self._tet_shell
        pos_shell = self.tet_grid.verts[shell] + offsets[shell]
        d = d.index_add(0, shell, self.tet_grid.residual(pos_shell))
        mesh = marching_tets(self.tet_grid, self.sampler, sdf_values=d)
        params = self.fine_params()
        if mesh.n_verts == 0:
            self._count_skip("fine", step, "surface vanished")
            self._log_metrics({"stage": "fine", "step": step,
                               "skipped": True})
            return

        loss_lap = laplacian_loss(mesh)
        loss_nc = normal_consistency_loss(mesh)
        render_mesh = (mesh if ctx.space == "canonical"
                       else self._pose_mesh(mesh, ctx.pose))

        gb = rasterize(render_mesh, camera)
        _, dirs = ray_grid(camera)
        bg_img = self.background(
            torch.tensor(dirs.reshape(-1, 3), dtype=DTYPE)).view(
            camera.height, camera.width, 3)
        img = shade(gb, render_mesh, self.fine_field, bg_img, camera)

        condition, _ = render_densepose(self.body, ctx.pose, camera)
        positive, negative = view_prompt(self.prompt, camera, ctx.part)
        rng_sds = self._rng("fine", step, 2)
        t = sample_timestep(step, "fine", rng_sds)
        grad_img, _ = sds_pixel_gradient(
            self.guidance, img.detach().numpy(), condition, positive, step,
            "fine", cfg_scale=cfg.cfg_scale, rescale=cfg.rescale,
            rng=rng_sds, t=t, view=(ctx.pose, camera),
            negative_prompt=negative)

        surrogate = cfg.lambda_sds * (
            torch.tensor(grad_img, dtype=DTYPE) * img).sum()
        total = (surrogate + cfg.lambda_laplacian * loss_lap
                 + cfg.lambda_normal * loss_nc)
        total.backward()
        stepped = self._apply(params, "fine", step,
                              extra_grad_check=(grad_img,))

        self._log_metrics({
            "stage": "fine", "step": step, "t": t, "space": ctx.space,
            "part": ctx.part, "res": cfg.fine_res,
            "grad_rms": float(np.sqrt(np.mean(grad_img ** 2))),
            "loss_laplacian": float(loss_lap.detach()),
            "loss_normal": float(loss_nc.detach()),
            "n_verts": mesh.n_verts, "skipped": not stepped})

    # -- orchestration -----------------------------------------------------

    def final_mesh(self):
        with torch.no_grad():
            mesh = marching_tets(self.tet_grid, self.sampler)
            colors = surface_color(self.fine_field, mesh)
        return mesh, colors

    def render_view(self, camera: CameraSpec, pose: Pose = None):
        """Textured rasterization of the trained avatar, as a numpy image."""
        mesh, _ = self.final_mesh()
        if pose is not None:
            mesh = self._pose_mesh(mesh, pose)
        gb = rasterize(mesh, camera)
        _, dirs = ray_grid(camera)
        with torch.no_grad():
            bg_img = self.background(
                torch.tensor(dirs.reshape(-1, 3), dtype=DTYPE)).view(
                camera.height, camera.width, 3)
            img = shade(gb, mesh, self.fine_field, bg_img, camera)
        return img.numpy()

    def run(self) -> RunArtifacts:
        cfg = self.cfg
        out = self.out_dir
        cfg.to_json(out / "config.json")
        manifest = {"complete": False, "stages": []}

        def write_manifest():
            with open(out / "manifest.json", "w") as f:
                json.dump(manifest, f, indent=2, sort_keys=True)

        write_manifest()
        coarse_ckpt = out / "coarse.ckpt"
        fine_ckpt = out / "fine.ckpt"
        mesh_path = out / "avatar.ply"
        metrics_path = out / "metrics.jsonl"
        artifacts = RunArtifacts(out, coarse_ckpt, fine_ckpt, mesh_path,
                                 metrics_path)
        t_start = time.monotonic()
        try:
            with open(metrics_path, "w") as mf, \
                    open(out / "timing.jsonl", "w") as tf:
                self._metrics_f = mf
                self._timing_f = tf
                for step in range(cfg.coarse_steps):
                    t0 = time.monotonic()
                    self.coarse_step(step)
                    self._log_timing({"stage": "coarse", "step": step,
                                      "seconds": time.monotonic() - t0})
                save_checkpoint(coarse_ckpt, self.coarse_params())
                manifest["stages"].append("coarse")
                write_manifest()

                self.setup_fine()
                for step in range(cfg.fine_steps):
                    t0 = time.monotonic()
                    self.fine_step(step)
                    self._log_timing({"stage": "fine", "step": step,
                                      "seconds": time.monotonic() - t0})
                save_checkpoint(fine_ckpt, self.fine_params())
                manifest["stages"].append("fine")

                mesh, colors = self.final_mesh()
                export_ply(mesh, mesh_path, colors=colors.numpy())
                artifacts.mesh = mesh
                artifacts.colors = colors
                manifest["stages"].append("export")
                manifest["complete"] = True
        finally:
            self._metrics_f = None
            self._timing_f = None
            manifest["runtime_seconds"] = time.monotonic() - t_start
            write_manifest()
        return artifacts


def run(config: TrainConfig, prompt: PromptSpec, guidance, body: BodyModel,
        out_dir) -> RunArtifacts:
    """Full coarse-to-fine optimization; see Trainer for the stage logic."""
    return Trainer(config, prompt, guidance, body, out_dir).run()
