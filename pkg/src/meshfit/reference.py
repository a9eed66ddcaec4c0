"""Black-box reference image providers.

The optimizer only ever sees (camera, light, image) triples.  The internal
provider renders a high-resolution scene through the same forward pipeline
(supersampled, no gradients recorded); the external provider replays a JSON
manifest of precomputed images for cross-renderer conversion.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adjoint import Tape
from .pipeline import RenderSettings, Scene, render_scene
from .raster import Camera
from .shading import PointLight
from . import scene_io


def supersample_factor(samples: int) -> int:
    k = int(round(np.sqrt(samples)))
    if k * k != samples or k < 1:
        raise ValueError(f"supersample count must be a perfect square, got {samples}")
    return k


def internal_render(
    scene: Scene,
    camera: Camera,
    light: PointLight,
    settings: RenderSettings,
    supersample: int = 1,
    frame: int | None = None,
) -> np.ndarray:
    """Deterministic forward render at a k x k sample grid, box-downfiltered.

    With supersample 1 this is bit-identical to the differentiable forward
    pass (same code path, gradients simply not recorded).
    """
    k = supersample_factor(supersample)
    cam = Camera(
        view=camera.view, proj=camera.proj, width=camera.width * k, height=camera.height * k
    )
    hi = RenderSettings(
        width=cam.width,
        height=cam.height,
        aa=settings.aa,
        msaa_samples=settings.msaa_samples,
        passes=settings.passes,
        background=settings.background,
        trilinear=settings.trilinear,
    )
    out = render_scene(Tape(record=False), scene, cam, light, hi, frame=frame)
    img = out["image"].values
    if k == 1:
        return img
    h, w, c = img.shape
    return img.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))


class InternalProvider:
    """Reference renders from a (typically high-resolution) scene."""

    mode = "internal"

    def __init__(self, scene: Scene, settings: RenderSettings, supersample: int = 16):
        supersample_factor(supersample)  # validate early
        self.scene = scene
        self.settings = settings
        self.supersample = supersample

    def render(self, camera: Camera, light: PointLight, frame: int | None = None) -> np.ndarray:
        return internal_render(
            self.scene, camera, light,
            RenderSettings(
                width=camera.width, height=camera.height,
                aa=self.settings.aa, msaa_samples=self.settings.msaa_samples,
                passes=self.settings.passes, background=self.settings.background,
                trilinear=False,
            ),
            supersample=self.supersample, frame=frame,
        )


@dataclass
class ManifestRecord:
    view: np.ndarray
    proj: np.ndarray
    light_pos: np.ndarray
    light_intensity: np.ndarray
    image_path: Path


def load_manifest(path) -> list[ManifestRecord]:
    """Parse the external-reference manifest.

    Schema: {"records": [{"view_matrix": 16 row-major, "proj_matrix": 16,
    "light_pos": 3, "light_intensity": 3, "image": relative path}, ...]}
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    records = []
    for i, rec in enumerate(doc["records"]):
        try:
            records.append(
                ManifestRecord(
                    view=np.asarray(rec["view_matrix"], dtype=np.float64).reshape(4, 4),
                    proj=np.asarray(rec["proj_matrix"], dtype=np.float64).reshape(4, 4),
                    light_pos=np.asarray(rec["light_pos"], dtype=np.float64).reshape(3),
                    light_intensity=np.asarray(rec["light_intensity"], dtype=np.float64).reshape(3),
                    image_path=path.parent / rec["image"],
                )
            )
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}: malformed record {i}: {e}") from e
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


class ExternalProvider:
    """Replays manifest conditions; fit samples them with replacement."""

    mode = "external"

    def __init__(self, manifest_path):
        self.records = load_manifest(manifest_path)
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def fetch(self, index: int, resolution: tuple[int, int]):
        """(camera, light, linear HDR image) for one manifest record."""
        rec = self.records[int(index)]
        if not rec.image_path.exists():
            raise FileNotFoundError(f"reference image missing: {rec.image_path}")
        if index not in self._cache:
            self._cache[index] = scene_io.load_image(rec.image_path)
        img = self._cache[index]
        w, h = resolution
        if img.shape[0] != h or img.shape[1] != w:
            raise ValueError(
                f"{rec.image_path}: resolution {img.shape[1]}x{img.shape[0]} "
                f"does not match requested {w}x{h}"
            )
        camera = Camera(view=rec.view, proj=rec.proj, width=w, height=h)
        light = PointLight(position=rec.light_pos, intensity=rec.light_intensity)
        return camera, light, img

    def sample(self, rng: np.random.Generator, resolution: tuple[int, int]):
        return self.fetch(int(rng.integers(len(self.records))), resolution)
