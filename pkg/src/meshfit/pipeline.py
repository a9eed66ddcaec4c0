"""Latent-scene assembly and the composed differentiable forward render.

A Scene ties a base mesh, its parameter registry, optional skinning data,
precomputed subdivision topology, and the material pyramids together.
``render_scene`` runs mesh ops -> projection -> rasterization -> deferred
shading -> compositing -> antialiasing on one Tape so a single backward pass
reaches every learnable parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import Buffer, ParamRegistry, ParamTensor, Tape, value_of
from . import geometry, ops, raster, shading
from .geometry import BoneSet, Mesh, SubdivisionPlan
from .raster import Camera, RasterOutput, TexturePyramid
from .shading import Material, PointLight


@dataclass
class RenderSettings:
    width: int = 256
    height: int = 256
    aa: str = "antialias"            # "antialias" | "msaa"
    msaa_samples: int = 4
    passes: int = 1                  # depth peeling pass count
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trilinear: bool = False
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.aa not in ("antialias", "msaa"):
            raise ValueError(f"unknown aa mode: {self.aa!r}")
        if self.aa == "msaa" and self.msaa_samples not in raster.MSAA_PATTERNS:
            raise ValueError(f"msaa samples must be one of {sorted(raster.MSAA_PATTERNS)}")
        if self.passes < 1:
            raise ValueError("need at least one rasterization pass")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class LevelTopology:
    """Static connectivity of one tessellation level."""

    mesh: Mesh                      # template (positions are placeholders)
    vertex_uvs: np.ndarray | None   # (V, 2) representative uv per vertex
    _edge_map: dict | None = field(default=None, repr=False)

    @property
    def edge_map(self) -> dict:
        if self._edge_map is None:
            self._edge_map = raster.build_edge_map(self.mesh.faces)
        return self._edge_map


@dataclass
class Scene:
    """Latent asset: mesh, material, parameters, and render topology."""

    mesh: Mesh
    material: Material
    registry: ParamRegistry
    positions: ParamTensor
    skin_logits: ParamTensor | None = None
    bones: BoneSet | None = None
    plans: list = field(default_factory=list)
    final: LevelTopology = None
    laplacian_mode: str = "relative"
    name: str = "scene"

    def __post_init__(self):
        if self.final is None:
            self.final = _level_topology(self.mesh)

    @property
    def subdivision_levels(self) -> int:
        return len(self.plans)

    def bounding_sphere(self):
        return self.mesh.bounding_sphere()

    def posed_positions(self, tape: Tape, frame: int | None = None) -> Buffer:
        """Skinning followed by the subdivision chain and displacement."""
        positions = self.positions
        if frame is not None:
            if self.bones is None or self.skin_logits is None:
                raise ValueError("scene has no skinning data")
            positions = geometry.skin(tape, positions, self.skin_logits, self.bones, frame)
        for plan in self.plans:
            positions = plan.apply_positions(tape, positions)
        if self.material.displacement is not None:
            if self.final.vertex_uvs is None:
                raise ValueError("displacement requires texture coordinates")
            normals = geometry.compute_vertex_normals(tape, positions, self.final.mesh)
            positions = geometry.displace(
                tape, positions, normals,
                self.material.displacement.base, self.final.vertex_uvs,
                wrap=self.material.wrap,
            )
        return positions


def _level_topology(mesh: Mesh) -> LevelTopology:
    vuv = None
    if mesh.uvs is not None and mesh.uv_faces is not None:
        vuv = mesh.vertex_uvs()
    return LevelTopology(mesh=mesh, vertex_uvs=vuv)


def _register_pyramid(registry, name, base_values, learnable, independent):
    """Create a texture pyramid whose levels live in the registry."""
    base_values = np.asarray(base_values, dtype=np.float64)
    if independent:
        chain = [base_values]
        while max(chain[-1].shape[0], chain[-1].shape[1]) > 1:
            chain.append(raster.box_downsample_values(chain[-1]))
        params = [
            registry.register(f"{name}.mip{i}", lvl.shape, init=lvl, learnable=learnable)
            for i, lvl in enumerate(chain)
        ]
        return TexturePyramid(params, independent_levels=True)
    param = registry.register(name, base_values.shape, init=base_values, learnable=learnable)
    return TexturePyramid([param], independent_levels=False)


def build_scene(
    mesh: Mesh,
    kd,
    orm,
    normal_map=None,
    displacement=None,
    ambient=None,
    learn=("positions", "kd", "orm", "normal_map"),
    bones: BoneSet | None = None,
    skin_logits=None,
    subdivision_levels: int = 0,
    independent_mips: bool = False,
    laplacian_mode: str = "relative",
    wrap: str = "clamp",
    name: str = "scene",
) -> Scene:
    """Assemble a Scene, registering every optimizable buffer.

    ``kd``/``orm``/``normal_map``/``displacement`` are base-level texel
    arrays.  ``learn`` names the components that receive gradients.
    """
    registry = ParamRegistry()
    learn = set(learn or ())
    mesh = mesh.copy()

    positions = registry.register(
        "positions", mesh.positions.shape, init=mesh.positions, learnable="positions" in learn
    )
    mesh.positions = positions.values  # alias: mesh ops and optimizer share storage

    logits_param = None
    if bones is not None:
        if skin_logits is None:
            skin_logits = np.zeros((mesh.num_vertices, bones.num_bones))
        logits_param = registry.register(
            "skin_logits", np.shape(skin_logits), init=skin_logits,
            learnable="skin_logits" in learn,
        )
        mesh.skin_logits = logits_param.values

    kd_pyr = _register_pyramid(registry, "kd", kd, "kd" in learn, independent_mips)
    orm_pyr = _register_pyramid(registry, "orm", orm, "orm" in learn, independent_mips)
    nm_pyr = None
    if normal_map is not None:
        nm_pyr = _register_pyramid(registry, "normal_map", normal_map, "normal_map" in learn, independent_mips)
    disp_pyr = None
    if displacement is not None:
        disp_pyr = _register_pyramid(registry, "displacement", displacement, "displacement" in learn, False)

    material = Material(
        kd=kd_pyr, orm=orm_pyr, normal_map=nm_pyr, displacement=disp_pyr,
        ambient=ambient, wrap=wrap,
    )

    plans = []
    template = mesh
    for _ in range(subdivision_levels):
        plans.append(SubdivisionPlan(template))
        template = geometry.subdivide(template)

    if laplacian_mode == "relative":
        mesh.capture_initial_differentials()

    return Scene(
        mesh=mesh, material=material, registry=registry, positions=positions,
        skin_logits=logits_param, bones=bones, plans=plans,
        final=_level_topology(template), laplacian_mode=laplacian_mode, name=name,
    )


def screen_space_lod(uv_pix: np.ndarray, rast: RasterOutput, tex_w: int, tex_h: int) -> np.ndarray:
    """Per-pixel mip level from uv differences between adjacent covered pixels.

    Detached from the tape: the level selector is treated as a constant of
    the fetch.  Pixels with no covered neighbor fall back to level 0.
    """
    h, w = rast.height, rast.width
    uvimg = np.zeros((h, w, 2))
    uvimg.reshape(-1, 2)[rast.pix] = uv_pix
    mask = rast.mask

    foot = np.zeros((h, w))
    dx = np.abs(uvimg[:, 1:] - uvimg[:, :-1])
    fx = np.maximum(dx[:, :, 0] * tex_w, dx[:, :, 1] * tex_h)
    vx = mask[:, 1:] & mask[:, :-1]
    foot[:, :-1] = np.maximum(foot[:, :-1], np.where(vx, fx, 0.0))
    foot[:, 1:] = np.maximum(foot[:, 1:], np.where(vx, fx, 0.0))
    dy = np.abs(uvimg[1:, :] - uvimg[:-1, :])
    fy = np.maximum(dy[:, :, 0] * tex_w, dy[:, :, 1] * tex_h)
    vy = mask[1:, :] & mask[:-1, :]
    foot[:-1, :] = np.maximum(foot[:-1, :], np.where(vy, fy, 0.0))
    foot[1:, :] = np.maximum(foot[1:, :], np.where(vy, fy, 0.0))

    lod = np.zeros((h, w))
    covered = foot > 0
    lod[covered] = np.log2(foot[covered])
    return np.maximum(lod.reshape(-1)[rast.pix], 0.0)


def _shade_layer(tape, scene, rast, positions, normals, tangents, bitangents, light, camera, settings):
    """G-buffer interpolation, material fetches, and BRDF for one layer."""
    h, w = rast.height, rast.width
    if len(rast.pix) == 0:
        return Buffer(np.zeros((h, w, 3))), Buffer(np.zeros((h, w, 1)))

    mesh = scene.final.mesh
    pos_pix = raster.interpolate(tape, positions, rast, mesh.faces)
    n_pix = ops.normalize_rows(tape, raster.interpolate(tape, normals, rast, mesh.faces))
    uv_pix = raster.interpolate(tape, mesh.uvs, rast, mesh.uv_faces)

    lod = None
    if settings.trilinear:
        th, tw, _ = scene.material.kd.base_shape
        lod = screen_space_lod(uv_pix.values, rast, tw, th)

    wrap = scene.material.wrap
    kd_pix = raster.texture_sample(tape, scene.material.kd, uv_pix, lod=lod, wrap=wrap)
    orm_pix = raster.texture_sample(tape, scene.material.orm, uv_pix, lod=lod, wrap=wrap)

    if scene.material.normal_map is not None:
        t_pix = ops.normalize_rows(tape, raster.interpolate(tape, tangents, rast, mesh.faces))
        b_pix = ops.normalize_rows(tape, raster.interpolate(tape, bitangents, rast, mesh.faces))
        nm_pix = raster.texture_sample(tape, scene.material.normal_map, uv_pix, lod=lod, wrap=wrap)
        shade_normal = shading.apply_normal_map(tape, n_pix, t_pix, b_pix, nm_pix)
    else:
        shade_normal = n_pix

    rgb_pix, alpha_pix = shading.shade_deferred(
        tape, pos_pix, shade_normal, kd_pix, orm_pix, light, camera.position,
        ambient=scene.material.ambient,
    )
    color = ops.scatter_to_image(tape, rgb_pix, rast.pix, h, w)
    alpha = ops.scatter_to_image(tape, alpha_pix, rast.pix, h, w)
    return color, alpha


def render_scene(
    tape: Tape,
    scene: Scene,
    camera: Camera,
    light: PointLight,
    settings: RenderSettings,
    frame: int | None = None,
):
    """Full differentiable forward render.

    Returns a dict with the composited HDR image Buffer plus the
    intermediate records needed by callers (front-layer raster output,
    projected NDC, posed positions).
    """
    positions = scene.posed_positions(tape, frame=frame)
    mesh = scene.final.mesh
    normals = geometry.compute_vertex_normals(tape, positions, mesh)
    tangents = bitangents = None
    if scene.material.normal_map is not None:
        tangents, bitangents = geometry.compute_tangent_frame(tape, positions, normals, mesh)

    clip, ndc, valid = raster.project(tape, positions, camera)
    resolution = (settings.width, settings.height)

    if settings.passes > 1:
        layers = raster.depth_peel(tape, ndc, mesh.faces, resolution, passes=settings.passes, valid=valid)
    elif settings.aa == "msaa":
        layers = [raster.msaa_rasterize(tape, ndc, mesh.faces, resolution, settings.msaa_samples, valid=valid)]
    else:
        layers = [raster.rasterize(tape, ndc, mesh.faces, resolution, valid=valid)]

    shaded = []
    for r in layers:
        color, alpha = _shade_layer(
            tape, scene, r, positions, normals, tangents, bitangents, light, camera, settings
        )
        if r.coverage is not None:
            alpha = ops.mul(tape, alpha, r.coverage[:, :, None])
        shaded.append((color, alpha))

    image = shading.blend_layers(tape, shaded, settings.background)
    if settings.aa == "antialias":
        image = raster.antialias(tape, image, layers[0], ndc, mesh.faces, edge_map=scene.final.edge_map)

    return {
        "image": image,
        "layers": layers,
        "ndc": ndc,
        "positions": positions,
        "alpha": shaded[0][1],
    }
