"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import geometry, scene_io
from .adjoint import Tape, fd_check
from .optimize import FitConfig, fit, fit_prefilter
from .pipeline import render_scene
from .raster import Camera
from .reference import ExternalProvider, InternalProvider
from .shading import PointLight, tone_map_values

DEFAULT_SEED = 20177


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="optimize a latent asset against a reference")
    p_fit.add_argument("--config", required=True, help="fit configuration JSON")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_fit.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_render = sub.add_parser("render", help="one deterministic forward render")
    p_render.add_argument("--scene", required=True, help="scene JSON")
    p_render.add_argument("--camera", required=True, help="camera JSON (view/proj or eye/target/fov)")
    p_render.add_argument("--light", required=True, help="light JSON (position/intensity)")
    p_render.add_argument("--out", required=True, help="output image (.pfm or .png)")
    p_render.add_argument("--width", type=int, default=256)
    p_render.add_argument("--height", type=int, default=256)
    p_render.add_argument("--spp", type=int, default=1, help="supersampling (perfect square)")
    p_render.add_argument("--aa", choices=["antialias", "msaa"], default="antialias")
    p_render.add_argument("--msaa-samples", type=int, default=4)
    p_render.add_argument("--passes", type=int, default=1)

    p_grad = sub.add_parser("gradcheck", help="finite-difference adjoint suites")
    p_grad.add_argument("--suite", default="all", help="geometry|rasterizer|shading|loss|all")
    p_grad.add_argument("--epsilon", type=float, default=1e-4)

    p_bake = sub.add_parser("bake", help="fit preset: freeze/unfreeze per-component learning")
    p_bake.add_argument("--config", required=True)
    p_bake.add_argument("--out", required=True)
    p_bake.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_bake.add_argument(
        "--learn", default="normal_map",
        help="comma-separated components to optimize (e.g. normal_map,positions)",
    )

    p_sub = sub.add_parser("subdivide", help="edge-midpoint subdivision of an OBJ")
    p_sub.add_argument("--mesh", required=True)
    p_sub.add_argument("--out", required=True)
    p_sub.add_argument("--levels", type=int, default=1)

    p_info = sub.add_parser("info", help="print scene statistics")
    p_info.add_argument("--scene", required=True)
    return parser


def _load_camera(path, width, height) -> Camera:
    with open(path) as f:
        doc = json.load(f)
    if "view_matrix" in doc:
        return Camera(
            view=np.asarray(doc["view_matrix"]).reshape(4, 4),
            proj=np.asarray(doc["proj_matrix"]).reshape(4, 4),
            width=width, height=height,
        )
    from .raster import make_camera

    return make_camera(
        doc["eye"], doc.get("target", [0, 0, 0]),
        np.radians(doc.get("fov_degrees", 45.0)), width, height,
        up=doc.get("up", [0, 1, 0]), near=doc.get("near", 0.05), far=doc.get("far", 100.0),
    )


def _load_light(path) -> PointLight:
    with open(path) as f:
        doc = json.load(f)
    return PointLight(position=doc["position"], intensity=doc.get("intensity", [1.0, 1.0, 1.0]))


def _load_fit_setup(config_path, seed, out_dir):
    with open(config_path) as f:
        doc = json.load(f)
    base = Path(config_path).parent
    scene = scene_io.load_scene(base / doc["scene"])
    ref = doc.get("reference")
    if not ref:
        raise ValueError("config needs a 'reference' section")
    fit_doc = dict(doc.get("fit", {}))
    fit_doc["seed"] = seed
    config = FitConfig.from_dict(fit_doc)
    if ref["mode"] == "internal":
        ref_scene = scene_io.load_scene(base / ref["scene"])
        provider = InternalProvider(
            ref_scene, config.render_settings(), supersample=ref.get("supersample", config.supersample)
        )
    elif ref["mode"] == "external":
        provider = ExternalProvider(base / ref["manifest"])
    else:
        raise ValueError(f"unknown reference mode: {ref['mode']!r}")
    return scene, provider, config


def cmd_fit(args) -> int:
    try:
        scene, provider, config = _load_fit_setup(args.config, args.seed, args.out)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        runner = fit_prefilter if config.prefilter_resolutions else fit
        result = runner(scene, provider, config, out_dir=args.out, resume=args.resume)
        scene_io.save_obj(scene.mesh, Path(args.out) / "final.obj", material=scene.material)
        print(f"fit finished: {result.iterations_run} iterations, final L_image "
              f"{result.log[-1]['L_image']:.6g}" if result.log else "fit finished")
        return 0
    except (FloatingPointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_bake(args) -> int:
    try:
        scene, provider, config = _load_fit_setup(args.config, args.seed, args.out)
        learn = {s.strip() for s in args.learn.split(",") if s.strip()}
        for p in scene.registry:
            component = p.name.split(".")[0].replace("normal_map", "normal_map")
            base = p.name.split(".")[0]
            p.learnable = base in learn or component in learn
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        result = fit(scene, provider, config, out_dir=args.out)
        scene_io.save_obj(scene.mesh, Path(args.out) / "final.obj", material=scene.material)
        print(f"bake finished: {result.iterations_run} iterations")
        return 0
    except (FloatingPointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_render(args) -> int:
    try:
        scene = scene_io.load_scene(args.scene)
        camera = _load_camera(args.camera, args.width, args.height)
        light = _load_light(args.light)
    except (OSError, ValueError, KeyError, scene_io.ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        from .reference import internal_render
        from .pipeline import RenderSettings

        settings = RenderSettings(
            width=args.width, height=args.height, aa=args.aa,
            msaa_samples=args.msaa_samples, passes=args.passes,
        )
        img = internal_render(scene, camera, light, settings, supersample=args.spp)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.suffix.lower() == ".pfm":
            scene_io.write_pfm(out, img)
        else:
            scene_io.write_png(out, tone_map_values(img))
        print(f"wrote {out}")
        return 0
    except (FloatingPointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_gradcheck(args) -> int:
    from .gradsuite import SUITES, run_suite

    if args.suite != "all" and args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}; choose from {sorted(SUITES)} or 'all'",
              file=sys.stderr)
        return 2
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    failed = []
    for name in names:
        for report in run_suite(name, epsilon=args.epsilon):
            ok = report.fraction_within(1e-3) >= 0.95
            status = "ok" if ok else "FAIL"
            print(f"{status:4s} {report}")
            if not ok:
                failed.append(report.stage_name)
    if failed:
        print(f"gradcheck failures: {failed}", file=sys.stderr)
        return 1
    return 0


def cmd_subdivide(args) -> int:
    try:
        mesh, _ = scene_io.load_obj(args.mesh)
        for _ in range(args.levels):
            mesh = geometry.subdivide(mesh)
        scene_io.save_obj(mesh, args.out)
        print(f"wrote {args.out}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
        return 0
    except (OSError, ValueError, scene_io.ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def cmd_info(args) -> int:
    try:
        scene = scene_io.load_scene(args.scene)
    except (OSError, ValueError, KeyError, scene_io.ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    mesh = scene.mesh
    center, radius = scene.bounding_sphere()
    print(f"scene: {scene.name}")
    print(f"  vertices: {mesh.num_vertices}  faces: {mesh.num_faces}")
    print(f"  bounding sphere: center {np.round(center, 4).tolist()} radius {radius:.4g}")
    print(f"  subdivision levels: {scene.subdivision_levels}")
    if scene.bones is not None:
        print(f"  bones: {scene.bones.num_bones}  frames: {scene.bones.num_frames}")
    for p in scene.registry:
        print(f"  param {p.name}: shape {list(p.values.shape)} learnable={p.learnable}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    handlers = {
        "fit": cmd_fit,
        "bake": cmd_bake,
        "render": cmd_render,
        "gradcheck": cmd_gradcheck,
        "subdivide": cmd_subdivide,
        "info": cmd_info,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
