"""meshfit: appearance-driven optimization of triangle meshes and materials.

A differentiable CPU rasterizer and deferred PBR shader drive image-space
losses against black-box reference renders, descending gradients into mesh
vertices, skinning weights, and material texture pyramids.
"""
from .adjoint import Buffer, FdReport, ParamRegistry, ParamTensor, Stage, Tape, fd_check, zero_grads
from .geometry import BoneSet, Mesh, SubdivisionPlan, subdivide
from .loss import ScheduleState, chamfer_l1, init_lambda, lr_at, psnr, tonemapped_psnr
from .optimize import AdamState, FitConfig, FitResult, adam_step, fit, fit_prefilter, sample_view
from .pipeline import RenderSettings, Scene, build_scene, render_scene
from .raster import Camera, RasterOutput, TexturePyramid, make_camera
from .reference import ExternalProvider, InternalProvider, internal_render, load_manifest
from .shading import Material, PointLight

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BoneSet", "Buffer", "Camera", "ExternalProvider", "FdReport",
    "FitConfig", "FitResult", "InternalProvider", "Material", "Mesh",
    "ParamRegistry", "ParamTensor", "PointLight", "RasterOutput",
    "RenderSettings", "Scene", "ScheduleState", "Stage", "SubdivisionPlan",
    "Tape", "TexturePyramid", "adam_step", "build_scene", "chamfer_l1",
    "fd_check", "fit", "fit_prefilter", "init_lambda", "internal_render",
    "load_manifest", "lr_at", "make_camera", "psnr", "render_scene",
    "sample_view", "subdivide", "tonemapped_psnr", "zero_grads",
]
