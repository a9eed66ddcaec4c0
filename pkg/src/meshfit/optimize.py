"""The analysis-by-synthesis fit loop.

View/light sampling on spherical shells, batched differentiable renders
against black-box references, the combined objective with the decaying
regularizer weight, Adam with projected material clamps, CSV logging and
resumable checkpoints.  With a fixed seed the whole trajectory is
bit-reproducible.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .adjoint import ParamRegistry, Tape
from .geometry import laplacian_loss
from .loss import LOSSES, ScheduleState, init_lambda, lr_at
from .pipeline import RenderSettings, Scene, render_scene
from .raster import Camera, make_camera
from .shading import PointLight, tone_map_values
from . import scene_io

PREVIEW_STREAM = 0x9E3779B9
RESOLUTION_STREAM = 0x51ED270


@dataclass
class FitConfig:
    """Hyperparameters and sampler ranges for one fit.

    Camera and light distances are in units of the asset's bounding-sphere
    radius; light intensity is the base scale at the asset center (the
    sampled intensity is multiplied by the squared light distance so the
    irradiance stays range-stable).
    """

    iterations: int = 10000
    width: int = 256
    height: int = 256
    batch_size: int = 4
    lr0: float = 0.01
    loss: str = "l1_tonemapped"
    aa: str = "antialias"
    msaa_samples: int = 4
    passes: int = 1
    camera_distance: tuple = (2.5, 3.5)
    fov_degrees: float = 45.0
    light_radius: tuple = (2.5, 4.0)
    light_intensity: tuple = (2.0, 4.0)
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    frames: list | None = None
    checkpoint_every: int = 0
    lambda_override: float | None = None
    prefilter_resolutions: list | None = None
    supersample: int = 16
    log_timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not (1 <= self.batch_size <= 8):
            raise ValueError("batch_size must be between 1 and 8")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss: {self.loss!r}")
        if self.aa not in ("antialias", "msaa"):
            raise ValueError(f"unknown aa mode: {self.aa!r}")
        for name in ("camera_distance", "light_radius", "light_intensity"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi")
        if self.prefilter_resolutions is not None and not self.prefilter_resolutions:
            raise ValueError("prefilter resolution list must be non-empty")

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def render_settings(self, width=None, height=None, trilinear=False) -> RenderSettings:
        return RenderSettings(
            width=width or self.width,
            height=height or self.height,
            aa=self.aa,
            msaa_samples=self.msaa_samples,
            passes=self.passes,
            background=np.asarray(self.background),
            trilinear=trilinear,
        )


class AdamState:
    """First/second moment buffers for every learnable parameter."""

    def __init__(self, registry: ParamRegistry, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {p.name: np.zeros_like(p.values) for p in registry if p.learnable}
        self.v = {p.name: np.zeros_like(p.values) for p in registry if p.learnable}


def adam_step(registry: ParamRegistry, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update on learnable parameters (in place)."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in registry:
        if not p.learnable:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _rotate_about(vec: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return vec * c + np.cross(axis, vec) * s + axis * np.dot(axis, vec) * (1.0 - c)


def _uniform_direction(rng: np.random.Generator) -> np.ndarray:
    z = rng.uniform(-1.0, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * np.cos(phi), z, r * np.sin(phi)])


def sample_view(
    rng: np.random.Generator,
    config: FitConfig,
    center: np.ndarray,
    radius: float,
    resolution: tuple[int, int] | None = None,
):
    """Random camera and point light on spherical shells around the asset.

    The draw order is fixed so trajectories are reproducible from the rng
    stream alone.
    """
    w, h = resolution or (config.width, config.height)
    cam_dir = _uniform_direction(rng)
    dist = rng.uniform(*config.camera_distance) * radius
    roll = rng.uniform(0.0, 2.0 * np.pi)
    light_dir = _uniform_direction(rng)
    light_dist = rng.uniform(*config.light_radius) * radius
    base_intensity = rng.uniform(*config.light_intensity)

    eye = center + cam_dir * dist
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(cam_dir, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    up = _rotate_about(up, cam_dir, roll)

    camera = make_camera(
        eye, center, np.radians(config.fov_degrees), w, h, up=up,
        near=0.1 * radius, far=(config.camera_distance[1] + 4.0) * radius,
    )
    light = PointLight(
        position=center + light_dir * light_dist,
        intensity=np.full(3, base_intensity * light_dist**2),
    )
    return camera, light


@dataclass
class FitResult:
    scene: Scene
    schedule: ScheduleState
    adam: AdamState
    iterations_run: int
    log: list = field(default_factory=list)
    out_dir: Path | None = None


def _item_rng(seed: int, iteration: int, item: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, item)))


def _format_row(row: dict) -> str:
    return "{iter},{L_image!r},{L_lap!r},{lambda_!r},{lr!r},{wall_ms}".format(
        iter=row["iter"], L_image=row["L_image"], L_lap=row["L_lap"],
        lambda_=row["lambda"], lr=row["lr"], wall_ms=row["wall_ms"],
    )


def _write_preview(out_dir: Path, iteration: int, latent: np.ndarray, reference: np.ndarray):
    grid = np.concatenate([latent, reference], axis=1)
    scene_io.write_png(out_dir / f"iter_{iteration:06d}.png", tone_map_values(grid))


def fit(scene: Scene, provider, config: FitConfig, out_dir=None, resume=None) -> FitResult:
    """Minimize the image loss (plus regularizer) over random view/light pairs."""
    return _run(scene, provider, config, out_dir, resume, prefilter=False)


def fit_prefilter(scene: Scene, provider, config: FitConfig, out_dir=None, resume=None) -> FitResult:
    """Prefilter fit: per-iteration target resolution, trilinear fetches.

    Requires texture pyramids with independent levels; the latent renders at
    one shading sample per pixel while the reference is supersampled.
    """
    if config.prefilter_resolutions is None:
        raise ValueError("prefilter fit needs config.prefilter_resolutions")
    if not scene.material.kd.independent_levels:
        raise ValueError("prefilter fit needs independent texture mip levels")
    return _run(scene, provider, config, out_dir, resume, prefilter=True)


def _run(scene: Scene, provider, config: FitConfig, out_dir, resume, prefilter: bool) -> FitResult:
    registry = scene.registry
    center, radius = scene.bounding_sphere()
    adam = AdamState(registry)
    schedule = None
    start_iter = 0
    log_rows: list[dict] = []

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        schedule = ScheduleState(lambda_0=0.0, lambda_min=0.0, lr_0=config.lr0)
        start_iter = scene_io.load_checkpoint(resume, registry, adam, schedule)

    preview_rng = np.random.default_rng(np.random.SeedSequence((config.seed, PREVIEW_STREAM)))
    if provider.mode == "external":
        preview_cam, preview_light, preview_ref = provider.fetch(0, (config.width, config.height))
    else:
        preview_cam, preview_light = sample_view(preview_rng, config, center, radius)
        preview_ref = None

    log_file = None
    if out_dir is not None:
        log_file = open(out_dir / "log.csv", "w" if start_iter == 0 else "a")
        if start_iter == 0:
            log_file.write("iter,L_image,L_lap,lambda,lr,wall_ms\n")

    try:
        for t in range(start_iter, config.iterations):
            t0 = time.perf_counter()
            registry.zero_grads()

            if prefilter:
                res_rng = np.random.default_rng(
                    np.random.SeedSequence((config.seed, t, RESOLUTION_STREAM))
                )
                side = int(config.prefilter_resolutions[res_rng.integers(len(config.prefilter_resolutions))])
                width = height = side
            else:
                width, height = config.width, config.height
            settings = config.render_settings(width, height, trilinear=prefilter)

            image_loss = 0.0
            for j in range(config.batch_size):
                rng = _item_rng(config.seed, t, j)
                frame = None
                if config.frames:
                    frame = int(config.frames[rng.integers(len(config.frames))])
                if provider.mode == "external":
                    camera, light, ref = provider.sample(rng, (width, height))
                else:
                    camera, light = sample_view(rng, config, center, radius, (width, height))
                    ref = provider.render(camera, light, frame=frame)
                tape = Tape()
                out = render_scene(tape, scene, camera, light, settings, frame=frame)
                lbuf = LOSSES[config.loss](tape, out["image"], ref)
                if not np.isfinite(lbuf.values):
                    raise FloatingPointError(f"non-finite image loss at iteration {t}")
                tape.backward(lbuf, seed=1.0 / config.batch_size)
                image_loss += float(lbuf.values) / config.batch_size

            ltape = Tape()
            lap = laplacian_loss(ltape, scene.positions, scene.mesh, mode=scene.laplacian_mode)
            lap_value = float(lap.values)

            if schedule is None:
                lam0, lam_min = init_lambda(image_loss, lap_value, config.lambda_override)
                schedule = ScheduleState(lambda_0=lam0, lambda_min=lam_min, lr_0=config.lr0)
            ltape.backward(lap, seed=schedule.lambda_current)

            lr = lr_at(t, config.lr0)
            adam_step(registry, adam, lr)
            scene.material.clamp_()

            wall_ms = int(round((time.perf_counter() - t0) * 1000.0)) if config.log_timing else 0
            row = {
                "iter": t, "L_image": image_loss, "L_lap": lap_value,
                "lambda": schedule.lambda_current, "lr": lr, "wall_ms": wall_ms,
            }
            log_rows.append(row)
            if log_file is not None:
                log_file.write(_format_row(row) + "\n")

            # advance before checkpointing so a resumed run picks up the
            # weight of the iteration it will execute next
            schedule.advance()

            is_last = t == config.iterations - 1
            if out_dir is not None and (
                is_last or (config.checkpoint_every > 0 and (t + 1) % config.checkpoint_every == 0)
            ):
                scene_io.save_checkpoint(out_dir / f"ckpt_{t + 1:06d}.bin", t + 1, registry, adam, schedule)
                latent = render_scene(
                    Tape(record=False), scene, preview_cam, preview_light,
                    config.render_settings(), frame=config.frames[0] if config.frames else None,
                )["image"].values
                ref_img = preview_ref
                if ref_img is None:
                    ref_img = provider.render(preview_cam, preview_light,
                                              frame=config.frames[0] if config.frames else None)
                _write_preview(out_dir, t + 1, latent, ref_img)
    finally:
        if log_file is not None:
            log_file.close()

    return FitResult(
        scene=scene, schedule=schedule, adam=adam,
        iterations_run=config.iterations - start_iter, log=log_rows, out_dir=out_dir,
    )
