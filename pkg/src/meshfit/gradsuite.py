"""Registered finite-difference suites for every differentiable stage.

Each suite builds small deterministic scenes and wraps pipeline stages as
``Stage`` objects for :func:`meshfit.adjoint.fd_check`.  The CLI `gradcheck`
command and the acceptance tests both run these.
"""
from __future__ import annotations

import numpy as np

from .adjoint import Buffer, Stage, Tape, fd_check, stage_from_builder
from . import geometry, ops, raster, shading
from .geometry import Mesh, BoneSet, SubdivisionPlan
from .loss import ScheduleState, l1_tonemapped, mse, objective
from .primitives import uv_sphere
from .raster import TexturePyramid


def _toy_mesh() -> Mesh:
    return uv_sphere(n_lat=4, n_lon=6, radius=1.0)


def _toy_triangles():
    """Two generic triangles, one partly occluding the other."""
    ndc = np.array(
        [
            [-0.62, -0.55, 0.10],
            [0.71, -0.48, 0.15],
            [0.05, 0.68, 0.05],
            [-0.20, -0.85, 0.45],
            [0.88, 0.13, 0.55],
            [-0.55, 0.62, 0.50],
        ]
    )
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    return ndc, faces


def _toy_camera(res=24):
    return raster.make_camera(
        eye=(0.4, 0.7, 2.6), target=(0.0, 0.0, 0.0), fov_y=np.radians(40.0),
        width=res, height=res, near=0.2, far=20.0,
    )


def _geometry_stages():
    mesh = _toy_mesh()
    rng = np.random.default_rng(7)
    jitter = mesh.positions + 0.02 * rng.standard_normal(mesh.positions.shape)

    def normals_builder(tape, p):
        return geometry.compute_vertex_normals(tape, p, mesh)

    yield stage_from_builder(normals_builder, name="geometry.vertex_normals"), [jitter]

    def tangent_builder(tape, p):
        n = geometry.compute_vertex_normals(tape, p, mesh)
        t, b = geometry.compute_tangent_frame(tape, p, n, mesh)
        return ops.concat_cols(tape, [t, b])

    yield stage_from_builder(tangent_builder, name="geometry.tangent_frame"), [jitter]

    def laplacian_builder(tape, p):
        return geometry.uniform_laplacian(tape, p, mesh)

    yield stage_from_builder(laplacian_builder, name="geometry.uniform_laplacian"), [jitter]

    def laploss_builder(tape, p):
        return geometry.laplacian_loss(tape, p, mesh, mode="absolute")

    yield stage_from_builder(laploss_builder, name="geometry.laplacian_loss"), [jitter]

    bones = BoneSet(
        np.stack(
            [
                np.stack(
                    [
                        np.array([[1, 0, 0, 0.3], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]]),
                        np.array([[0.8, -0.2, 0, 0], [0.2, 0.9, 0, 0.5], [0, 0, 1.1, 0], [0, 0, 0, 1.0]]),
                    ]
                )
            ]
        )
    )
    logits = 0.5 * rng.standard_normal((mesh.num_vertices, 2))

    def skin_builder(tape, p, z):
        return geometry.skin(tape, p, z, bones, frame=0)

    yield stage_from_builder(skin_builder, name="geometry.skin"), [jitter, logits]

    plan = SubdivisionPlan(mesh)

    def subdiv_builder(tape, p):
        return plan.apply_positions(tape, p)

    yield stage_from_builder(subdiv_builder, name="geometry.subdivide_positions"), [jitter]

    disp = 0.1 + 0.05 * rng.random((4, 4, 1))
    vuv = mesh.vertex_uvs()

    def displace_builder(tape, p, d):
        n = geometry.compute_vertex_normals(tape, p, mesh)
        return geometry.displace(tape, p, n, d, vuv)

    yield stage_from_builder(displace_builder, name="geometry.displace"), [jitter, disp]


def _rasterizer_stages():
    res = 24
    ndc, faces = _toy_triangles()
    rng = np.random.default_rng(11)
    attr = rng.random((6, 3))

    def signature_of(builder_sig):
        def sig(inputs):
            return builder_sig([np.asarray(x) for x in inputs])

        return sig

    def raster_interp_builder(tape, nd):
        r = raster.rasterize(tape, nd, faces, (res, res))
        pix_attr = raster.interpolate(tape, attr, r, faces)
        return ops.scatter_to_image(tape, pix_attr, r.pix, res, res)

    def raster_sig(inputs):
        r = raster.rasterize(Tape(record=False), Buffer(inputs[0]), faces, (res, res))
        return r.tri_map

    yield Stage(
        forward=lambda x: _forward(raster_interp_builder, x),
        vjp=lambda x, g: _vjp(raster_interp_builder, x, g),
        signature=raster_sig,
        name="rasterizer.rasterize_interpolate",
    ), [ndc]

    cam = _toy_camera(res)
    mesh = _toy_mesh()

    def project_builder(tape, p):
        clip, nd, valid = raster.project(tape, p, cam)
        return nd

    yield stage_from_builder(project_builder, name="rasterizer.project"), [mesh.positions]

    tex = rng.random((5, 4, 3))
    uv = rng.random((20, 2)) * 0.8 + 0.1

    def bilinear_builder(tape, t, u):
        pyr = TexturePyramid([t], independent_levels=False)
        return raster.texture_sample(tape, pyr, u)

    yield stage_from_builder(bilinear_builder, name="rasterizer.texture_bilinear"), [tex, uv]

    tex8 = rng.random((8, 8, 2))
    lod = rng.random(20) * 2.0

    def trilinear_builder(tape, t, u):
        pyr = TexturePyramid([t], independent_levels=False)
        return raster.texture_sample(tape, pyr, u, lod=lod)

    yield stage_from_builder(trilinear_builder, name="rasterizer.texture_trilinear"), [tex8, uv]

    shadeimg = rng.random((res, res, 3))

    def aa_builder(tape, img, nd):
        r = raster.rasterize(tape, nd, faces, (res, res))
        return raster.antialias(tape, img, r, nd, faces)

    def aa_sig(inputs):
        img, nd = inputs
        t = Tape(record=False)
        ndb = Buffer(nd)
        r = raster.rasterize(t, ndb, faces, (res, res))
        blends = []
        raster.antialias(t, Buffer(img), r, ndb, faces, debug_blends=blends)
        pairs = np.array(
            [(b[0], b[1], b[2], b[3], b[7], b[8]) for b in blends], dtype=np.int64
        ).ravel()
        return np.concatenate([r.tri_map.ravel(), pairs])

    yield Stage(
        forward=lambda x: _forward(aa_builder, x),
        vjp=lambda x, g: _vjp(aa_builder, x, g),
        signature=aa_sig,
        name="rasterizer.antialias",
    ), [shadeimg, ndc]

    def msaa_builder(tape, nd):
        r = raster.msaa_rasterize(tape, nd, faces, (res, res), samples=4)
        pix_attr = raster.interpolate(tape, attr, r, faces)
        img = ops.scatter_to_image(tape, pix_attr, r.pix, res, res)
        return ops.mul(tape, img, r.coverage[:, :, None])

    def msaa_sig(inputs):
        r = raster.msaa_rasterize(Tape(record=False), Buffer(inputs[0]), faces, (res, res), samples=4)
        return np.concatenate([r.tri_map.ravel(), np.round(r.coverage * 4).astype(np.int64).ravel()])

    yield Stage(
        forward=lambda x: _forward(msaa_builder, x),
        vjp=lambda x, g: _vjp(msaa_builder, x, g),
        signature=msaa_sig,
        name="rasterizer.msaa",
    ), [ndc]

    def peel_builder(tape, nd):
        layers = raster.depth_peel(tape, nd, faces, (res, res), passes=2)
        imgs = []
        for r in layers:
            pix_attr = raster.interpolate(tape, attr, r, faces)
            imgs.append(ops.scatter_to_image(tape, pix_attr, r.pix, res, res))
        return ops.add(tape, imgs[0], ops.scale(tape, imgs[1], 0.5))

    def peel_sig(inputs):
        t = Tape(record=False)
        layers = raster.depth_peel(t, Buffer(inputs[0]), faces, (res, res), passes=2)
        return np.stack([r.tri_map for r in layers])

    yield Stage(
        forward=lambda x: _forward(peel_builder, x),
        vjp=lambda x, g: _vjp(peel_builder, x, g),
        signature=peel_sig,
        name="rasterizer.depth_peel",
    ), [ndc]


def _shading_stages():
    rng = np.random.default_rng(13)
    n = 24
    normal = rng.standard_normal((n, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    normal[:, 2] = np.abs(normal[:, 2]) + 0.2
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    tangent = np.cross(normal, np.array([0.0, 1.0, 0.0]))
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    bitangent = np.cross(normal, tangent)
    nm = 0.3 + 0.4 * rng.random((n, 3))

    def nmap_builder(tape, nrm, t, b, m):
        return shading.apply_normal_map(tape, nrm, t, b, m)

    yield stage_from_builder(nmap_builder, name="shading.apply_normal_map"), [normal, tangent, bitangent, nm]

    light = shading.PointLight(position=(1.5, 2.0, 2.5), intensity=(3.0, 3.0, 3.0))
    cam_pos = np.array([0.0, 0.5, 3.0])
    position = rng.standard_normal((n, 3)) * 0.4
    kd = np.concatenate([0.2 + 0.6 * rng.random((n, 3)), 0.4 + 0.5 * rng.random((n, 1))], axis=1)
    orm = np.stack(
        [0.1 + 0.6 * rng.random(n), 0.25 + 0.5 * rng.random(n), 0.1 + 0.7 * rng.random(n)], axis=1
    )

    def shade_builder(tape, p, nrm, k, o):
        nn = ops.normalize_rows(tape, nrm)
        rgb, alpha = shading.shade_deferred(tape, p, nn, k, o, light, cam_pos, ambient=(0.05, 0.05, 0.05))
        return ops.concat_cols(tape, [rgb, alpha])

    yield stage_from_builder(shade_builder, name="shading.shade_deferred"), [position, normal, kd, orm]

    c0 = rng.random((4, 4, 3))
    a0 = 0.2 + 0.6 * rng.random((4, 4, 1))
    c1 = rng.random((4, 4, 3))
    a1 = 0.2 + 0.6 * rng.random((4, 4, 1))

    def blend_builder(tape, cc0, aa0, cc1, aa1):
        return shading.blend_layers(tape, [(cc0, aa0), (cc1, aa1)], np.array([0.1, 0.2, 0.3]))

    yield stage_from_builder(blend_builder, name="shading.blend_layers"), [c0, a0, c1, a1]

    hdr = rng.random((6, 6, 3)) * 3.0 + 0.01

    def tonemap_builder(tape, x):
        return shading.tone_map(tape, x)

    yield stage_from_builder(tonemap_builder, name="shading.tone_map"), [hdr]


def _loss_stages():
    rng = np.random.default_rng(17)
    img = rng.random((6, 6, 3)) * 2.0
    ref = rng.random((6, 6, 3)) * 2.0

    def l1_builder(tape, x):
        return l1_tonemapped(tape, x, ref)

    yield stage_from_builder(l1_builder, name="loss.l1_tonemapped"), [img]

    def mse_builder(tape, x):
        return mse(tape, x, ref)

    yield stage_from_builder(mse_builder, name="loss.mse"), [img]

    schedule = ScheduleState(lambda_0=0.7, lambda_min=0.014, lr_0=0.01)
    lap_vec = rng.standard_normal((10, 3))

    def objective_builder(tape, x, d):
        il = mse(tape, x, ref)
        ll = ops.mean_all(tape, ops.square(tape, d))
        return objective(tape, il, ll, schedule)

    yield stage_from_builder(objective_builder, name="loss.objective"), [img, lap_vec]


def _forward(builder, inputs):
    tape = Tape(record=False)
    return np.array(builder(tape, *[Buffer(x) for x in inputs]).values)


def _vjp(builder, inputs, out_adjoint):
    tape = Tape()
    bufs = [Buffer(x) for x in inputs]
    out = builder(tape, *bufs)
    tape.backward(out, np.asarray(out_adjoint, dtype=np.float64))
    return [b.grad.copy() for b in bufs]


SUITES = {
    "geometry": _geometry_stages,
    "rasterizer": _rasterizer_stages,
    "shading": _shading_stages,
    "loss": _loss_stages,
}


def run_suite(name: str, epsilon: float = 1e-4, sample_count: int = 48, seed: int = 0):
    """Yield an FdReport per registered stage of one suite."""
    rng = np.random.default_rng(seed)
    for stage, inputs in SUITES[name]():
        yield fd_check(stage, inputs, epsilon=epsilon, sample_count=sample_count, rng=rng)


def run_all(epsilon: float = 1e-4, sample_count: int = 48, seed: int = 0):
    for name in sorted(SUITES):
        yield from run_suite(name, epsilon=epsilon, sample_count=sample_count, seed=seed)
