"""Differentiable CPU rasterization primitives.

Projection, pixel-center coverage with a top-left ownership rule,
barycentric interpolation with adjoints into vertex positions, latent
texture pyramids with bilinear/trilinear sampling, silhouette antialiasing,
MSAA visibility, and depth peeling for order-independent transparency.

Conventions (fixed for reproducibility):
  - NDC x,y in [-1, 1]; image row 0 maps to y = +1 (top).
  - NDC depth in [-1, 1], -1 at the near plane; depth tests use the
    barycentric-interpolated NDC depth.
  - Barycentrics (u, v) are the weights of a triangle's first and second
    vertex; the third weight is 1 - u - v.
  - Pixels exactly on shared edges are owned once via the top-left rule;
    depth ties resolve to the lower triangle index.
  - Triangles with any vertex at w <= eps are culled (no near clipping).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import Buffer, ParamTensor, Tape, is_buffer, value_of
from . import ops

_W_EPS = 1e-9
_MAX_PAIRS = 2_000_000

# Fixed sub-pixel offsets (x, y) in pixel units, relative to the center.
MSAA_PATTERNS = {
    1: [(0.0, 0.0)],
    4: [(-0.125, -0.375), (0.375, -0.125), (-0.375, 0.125), (0.125, 0.375)],
    8: [
        (1 / 16, -3 / 16), (-1 / 16, 3 / 16), (5 / 16, 1 / 16), (-3 / 16, -5 / 16),
        (-5 / 16, 5 / 16), (-7 / 16, -1 / 16), (3 / 16, 7 / 16), (7 / 16, -7 / 16),
    ],
    16: [((i % 4 + 0.5) / 4 - 0.5, (i // 4 + 0.5) / 4 - 0.5) for i in range(16)],
}


@dataclass
class Camera:
    """View/projection pair plus target resolution."""

    view: np.ndarray
    proj: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64).reshape(4, 4)
        self.proj = np.asarray(self.proj, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    @property
    def position(self) -> np.ndarray:
        r = self.view[:3, :3]
        t = self.view[:3, 3]
        return -r.T @ t

    @property
    def view_proj(self) -> np.ndarray:
        return self.proj @ self.view


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Right-handed view matrix looking down -z."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("up vector is parallel to the view direction")
    right = right / rn
    upv = np.cross(right, fwd)
    m = np.eye(4)
    m[0, :3] = right
    m[1, :3] = upv
    m[2, :3] = -fwd
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def perspective(fov_y: float, aspect: float, near: float, far: float) -> np.ndarray:
    """OpenGL-style perspective projection; NDC depth -1 at near, +1 at far."""
    if near <= 0 or far <= near:
        raise ValueError("require 0 < near < far")
    f = 1.0 / np.tan(0.5 * fov_y)
    m = np.zeros((4, 4))
    m[0, 0] = f / aspect
    m[1, 1] = f
    m[2, 2] = (far + near) / (near - far)
    m[2, 3] = 2.0 * far * near / (near - far)
    m[3, 2] = -1.0
    return m


def make_camera(eye, target, fov_y, width, height, up=(0, 1, 0), near=0.1, far=100.0) -> Camera:
    return Camera(
        view=look_at(eye, target, up),
        proj=perspective(fov_y, width / height, near, far),
        width=width,
        height=height,
    )


def project(tape: Tape, positions, camera: Camera):
    """Homogeneous transform to clip space and perspective divide to NDC.

    Returns (clip, ndc, valid); vertices with clip w <= eps are flagged
    invalid and their NDC is zeroed.  Triangles touching them are culled by
    the rasterizer instead of being clipped.
    """
    pv = value_of(positions)
    if not np.all(np.isfinite(pv)):
        raise ValueError("non-finite vertex positions")
    m = camera.view_proj
    clip_v = pv @ m[:, :3].T + m[:, 3]
    w = clip_v[:, 3]
    valid = w > _W_EPS
    safe_w = np.where(valid, w, 1.0)
    ndc_v = np.where(valid[:, None], clip_v[:, :3] / safe_w[:, None], 0.0)

    clip = Buffer(clip_v)
    ndc = Buffer(ndc_v)

    def backward_ndc():
        g = ndc.grad * valid[:, None]
        clip.grad[:, :3] += g / safe_w[:, None]
        clip.grad[:, 3] += -np.sum(g * clip_v[:, :3], axis=1) / (safe_w * safe_w)

    def backward_clip():
        if is_buffer(positions):
            positions.grad += clip.grad @ m[:, :3]

    # record clip first so its closure runs after ndc's in the reversed replay
    tape.record_backward(backward_clip)
    tape.record_backward(backward_ndc)
    return clip, ndc, valid


@dataclass
class RasterOutput:
    """Per-pixel coverage record for one layer."""

    width: int
    height: int
    tri_map: np.ndarray                 # (H, W) int32, -1 background
    depth_map: np.ndarray               # (H, W) float64, +inf background
    pix: np.ndarray                     # (N,) linear row-major indices of covered pixels
    tri: np.ndarray                     # (N,) triangle index per covered pixel
    bary_u: Buffer = None               # (N,)
    bary_v: Buffer = None               # (N,)
    coverage: np.ndarray | None = None  # (H, W) in [0, 1] when MSAA is enabled

    @property
    def mask(self) -> np.ndarray:
        return self.tri_map >= 0

    def face_indices(self, faces: np.ndarray) -> np.ndarray:
        """Index triple per covered pixel from an (F, 3) index array."""
        return faces[self.tri]


def _top_left(dx, dy):
    # pixel centers exactly on an edge belong to it only when the edge points
    # downward in NDC y, or left when horizontal
    return (dy < 0.0) | ((dy == 0.0) & (dx < 0.0))


def _resolve_coverage(xy, z, tris, tri_ids, width, height, offset=(0.0, 0.0), depth_min_flat=None):
    """Nearest-triangle visibility at one sample position per pixel.

    Returns (tri_map, depth_map) with the ownership and tie rules from the
    module docstring.  ``depth_min_flat`` imposes a strictly-greater depth
    window per pixel (used by depth peeling).
    """
    ox, oy = offset
    tri_map = np.full(width * height, -1, dtype=np.int64)
    depth_map = np.full(width * height, np.inf)
    if len(tris) == 0:
        return tri_map.reshape(height, width), depth_map.reshape(height, width)

    a = xy[tris[:, 0]]
    b = xy[tris[:, 1]]
    c = xy[tris[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])

    # canonicalize to CCW so both windings rasterize (two-sided)
    flip = area < 0.0
    b2 = np.where(flip[:, None], c, b)
    c2 = np.where(flip[:, None], b, c)
    area2 = np.abs(area)
    alive = area2 > 1e-18

    # pixel-space bounding boxes
    xs = np.stack([a[:, 0], b2[:, 0], c2[:, 0]], axis=1)
    ys = np.stack([a[:, 1], b2[:, 1], c2[:, 1]], axis=1)
    jlo = np.ceil((xs.min(axis=1) + 1.0) * width / 2.0 - 0.5 - ox - 1e-12).astype(np.int64)
    jhi = np.floor((xs.max(axis=1) + 1.0) * width / 2.0 - 0.5 - ox + 1e-12).astype(np.int64)
    ilo = np.ceil((1.0 - ys.max(axis=1)) * height / 2.0 - 0.5 - oy - 1e-12).astype(np.int64)
    ihi = np.floor((1.0 - ys.min(axis=1)) * height / 2.0 - 0.5 - oy + 1e-12).astype(np.int64)
    jlo = np.clip(jlo, 0, width - 1)
    jhi = np.clip(jhi, 0, width - 1)
    ilo = np.clip(ilo, 0, height - 1)
    ihi = np.clip(ihi, 0, height - 1)
    wdt = jhi - jlo + 1
    hgt = ihi - ilo + 1
    alive &= (wdt > 0) & (hgt > 0)

    sel = np.flatnonzero(alive)
    if len(sel) == 0:
        return tri_map.reshape(height, width), depth_map.reshape(height, width)

    counts_all = (wdt[sel] * hgt[sel]).astype(np.int64)
    z0 = z[tris[:, 0]]
    z1 = np.where(flip, z[tris[:, 2]], z[tris[:, 1]])
    z2 = np.where(flip, z[tris[:, 1]], z[tris[:, 2]])

    start = 0
    while start < len(sel):
        stop = start
        total = 0
        while stop < len(sel) and (total == 0 or total + counts_all[stop] <= _MAX_PAIRS):
            total += counts_all[stop]
            stop += 1
        chunk = sel[start:stop]
        counts = counts_all[start:stop]
        start = stop

        fi = np.repeat(np.arange(len(chunk)), counts)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        loc = np.arange(int(counts.sum())) - offsets[fi]
        t = chunk[fi]
        dj = loc % wdt[t]
        di = loc // wdt[t]
        pj = jlo[t] + dj
        pi = ilo[t] + di
        px = (pj + 0.5 + ox) * 2.0 / width - 1.0
        py = 1.0 - (pi + 0.5 + oy) * 2.0 / height

        ax, ay = a[t, 0], a[t, 1]
        bx, by = b2[t, 0], b2[t, 1]
        cx, cy = c2[t, 0], c2[t, 1]

        e_ab = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        e_bc = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        e_ca = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)

        inside = (
            ((e_ab > 0) | ((e_ab == 0) & _top_left(bx - ax, by - ay)))
            & ((e_bc > 0) | ((e_bc == 0) & _top_left(cx - bx, cy - by)))
            & ((e_ca > 0) | ((e_ca == 0) & _top_left(ax - cx, ay - cy)))
        )
        if not inside.any():
            continue

        keep = np.flatnonzero(inside)
        t = t[keep]
        pix_lin = (pi[keep] * width + pj[keep]).astype(np.int64)
        depth = (e_bc[keep] * z0[t] + e_ca[keep] * z1[t] + e_ab[keep] * z2[t]) / area2[t]

        if depth_min_flat is not None:
            ok = depth > depth_min_flat[pix_lin]
            t, pix_lin, depth = t[ok], pix_lin[ok], depth[ok]
            if len(t) == 0:
                continue

        ids = tri_ids[t]
        order = np.lexsort((ids, depth, pix_lin))
        pix_s = pix_lin[order]
        first = np.ones(len(pix_s), dtype=bool)
        first[1:] = pix_s[1:] != pix_s[:-1]
        win_pix = pix_s[first]
        win_depth = depth[order][first]
        win_id = ids[order][first]

        cur_d = depth_map[win_pix]
        cur_t = tri_map[win_pix]
        better = (win_depth < cur_d) | ((win_depth == cur_d) & (win_id < cur_t))
        upd = win_pix[better]
        depth_map[upd] = win_depth[better]
        tri_map[upd] = win_id[better]

    return tri_map.reshape(height, width), depth_map.reshape(height, width)


def _barycentric_partials(a, b, c, px, py):
    """Values and derivatives of (u, v) at fixed sample points.

    u = cross(c-b, p-b)/A weights the first vertex, v = cross(a-c, p-c)/A the
    second, with A the (CCW-positive) doubled area.
    """
    ax, ay = a[:, 0], a[:, 1]
    bx, by = b[:, 0], b[:, 1]
    cx, cy = c[:, 0], c[:, 1]
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    n0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    n1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    u = n0 / area
    v = n1 / area

    dA = {
        "ax": by - cy, "ay": cx - bx,
        "bx": cy - ay, "by": ax - cx,
        "cx": ay - by, "cy": bx - ax,
    }
    dN0 = {
        "ax": 0.0, "ay": 0.0,
        "bx": cy - py, "by": px - cx,
        "cx": py - by, "cy": bx - px,
    }
    dN1 = {
        "ax": py - cy, "ay": cx - px,
        "bx": 0.0, "by": 0.0,
        "cx": ay - py, "cy": px - ax,
    }
    du = {k: (dN0[k] - u * dA[k]) / area for k in dA}
    dv = {k: (dN1[k] - v * dA[k]) / area for k in dA}
    return u, v, du, dv


def rasterize(
    tape: Tape,
    ndc,
    faces: np.ndarray,
    resolution: tuple[int, int],
    depth_min: np.ndarray | None = None,
    valid: np.ndarray | None = None,
) -> RasterOutput:
    """Pixel-center rasterization with differentiable barycentrics.

    Coverage (the triangle-id map) is discrete; the barycentrics of covered
    pixels carry adjoints back into the NDC vertex positions.
    ``depth_min``, when given, is a per-pixel exclusive near bound
    implementing the two-sided depth test used by depth peeling.
    """
    width, height = int(resolution[0]), int(resolution[1])
    nv = value_of(ndc)
    faces = np.asarray(faces, dtype=np.int64)
    keep = np.ones(len(faces), dtype=bool)
    if valid is not None:
        keep = valid[faces].all(axis=1)
    tri_ids = np.flatnonzero(keep)
    tris = faces[tri_ids]

    dmin = depth_min.ravel() if depth_min is not None else None
    tri_map, depth_map = _resolve_coverage(
        nv[:, :2], nv[:, 2], tris, tri_ids, width, height, depth_min_flat=dmin
    )

    pix = np.flatnonzero(tri_map.ravel() >= 0)
    tri = tri_map.ravel()[pix].astype(np.int64)

    i0, i1, i2 = faces[tri, 0], faces[tri, 1], faces[tri, 2]
    a, b, c = nv[i0, :2], nv[i1, :2], nv[i2, :2]
    pj = pix % width
    pi = pix // width
    px = (pj + 0.5) * 2.0 / width - 1.0
    py = 1.0 - (pi + 0.5) * 2.0 / height
    u, v, du, dv = _barycentric_partials(a, b, c, px, py)

    bu = Buffer(u)
    bv = Buffer(v)

    def backward():
        if not is_buffer(ndc):
            return
        gu, gv = bu.grad, bv.grad
        gx = np.zeros(3 * len(pix))
        gy = np.zeros(3 * len(pix))
        idx = np.concatenate([i0, i1, i2])
        for k, key in enumerate(("a", "b", "c")):
            gx[k * len(pix):(k + 1) * len(pix)] = gu * du[key + "x"] + gv * dv[key + "x"]
            gy[k * len(pix):(k + 1) * len(pix)] = gu * du[key + "y"] + gv * dv[key + "y"]
        np.add.at(ndc.grad[:, 0], idx, gx)
        np.add.at(ndc.grad[:, 1], idx, gy)

    tape.record_backward(backward)
    return RasterOutput(
        width=width, height=height, tri_map=tri_map, depth_map=depth_map,
        pix=pix, tri=tri, bary_u=bu, bary_v=bv,
    )


def interpolate(tape: Tape, attr, rast: RasterOutput, index_faces: np.ndarray) -> Buffer:
    """Barycentric combination of per-vertex attributes at covered pixels.

    ``attr`` is (V, K); ``index_faces`` supplies the index triple per face
    (positions use mesh.faces, texture coordinates use mesh.uv_faces).
    Output is (N, K) over covered pixels; adjoints flow into the attributes
    and into the barycentrics (and through them into vertex positions).
    """
    av = value_of(attr)
    if av.ndim != 2:
        raise ValueError("attributes must be (V, K)")
    idx = np.asarray(index_faces, dtype=np.int64)
    if idx.max(initial=-1) >= len(av):
        raise ValueError("attribute/vertex count mismatch")
    tri_idx = idx[rast.tri]
    a0 = av[tri_idx[:, 0]]
    a1 = av[tri_idx[:, 1]]
    a2 = av[tri_idx[:, 2]]
    u = rast.bary_u.values[:, None]
    v = rast.bary_v.values[:, None]
    out = Buffer(u * a0 + v * a1 + (1.0 - u - v) * a2)

    def backward():
        g = out.grad
        if is_buffer(attr):
            np.add.at(attr.grad, tri_idx[:, 0], u * g)
            np.add.at(attr.grad, tri_idx[:, 1], v * g)
            np.add.at(attr.grad, tri_idx[:, 2], (1.0 - u - v) * g)
        rast.bary_u.grad += np.sum(g * (a0 - a2), axis=1)
        rast.bary_v.grad += np.sum(g * (a1 - a2), axis=1)

    tape.record_backward(backward)
    return out


class TexturePyramid:
    """Mip chain with ceil-halved levels down to 1x1.

    With ``independent_levels`` false only level 0 is stored; coarser levels
    are recomputed per tape as 2x2 box filters, so their adjoints transpose
    back into level 0.  With it true each level is its own parameter and
    trilinear fetches touch exactly the bracketing levels.
    """

    def __init__(self, levels, independent_levels: bool = False):
        if not levels:
            raise ValueError("pyramid needs at least one level")
        self.independent_levels = bool(independent_levels)
        self._levels = list(levels)
        shape = value_of(self._levels[0]).shape
        if len(shape) != 3:
            raise ValueError("texture levels must be (H, W, C)")
        if self.independent_levels:
            for lo, hi in zip(self._levels[1:], self._levels[:-1]):
                hs, ws, cs = value_of(hi).shape
                ls = value_of(lo).shape
                if ls != ((hs + 1) // 2, (ws + 1) // 2, cs):
                    raise ValueError("independent levels must follow ceil halving")

    @classmethod
    def from_base(cls, base, independent_levels: bool = False):
        """Full chain derived from a base image; only meaningful level stack."""
        levels = [base]
        if independent_levels:
            cur = value_of(base)
            while max(cur.shape[0], cur.shape[1]) > 1:
                cur = box_downsample_values(cur)
                levels.append(Buffer(cur.copy()))
        return cls(levels, independent_levels)

    @property
    def base(self):
        return self._levels[0]

    @property
    def base_shape(self):
        return value_of(self._levels[0]).shape

    @property
    def num_levels(self) -> int:
        h, w, _ = self.base_shape
        n = 1
        while max(h, w) > 1:
            h, w = (h + 1) // 2, (w + 1) // 2
            n += 1
        return n

    @property
    def channels(self) -> int:
        return self.base_shape[2]

    def params(self):
        return [l for l in self._levels if isinstance(l, ParamTensor)]

    def level_values(self) -> list[np.ndarray]:
        if self.independent_levels:
            return [value_of(l) for l in self._levels]
        out = [value_of(self._levels[0])]
        while max(out[-1].shape[0], out[-1].shape[1]) > 1:
            out.append(box_downsample_values(out[-1]))
        return out

    def level_buffers(self, tape: Tape) -> list:
        if self.independent_levels:
            return list(self._levels)
        out = [self._levels[0]]
        while max(value_of(out[-1]).shape[0], value_of(out[-1]).shape[1]) > 1:
            out.append(box_downsample(tape, out[-1]))
        return out


def box_downsample_values(src: np.ndarray) -> np.ndarray:
    h, w, ch = src.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((oh, ow, ch))
    cnt = np.zeros((oh, ow, 1))
    for si in (0, 1):
        for sj in (0, 1):
            blk = src[si::2, sj::2]
            out[: blk.shape[0], : blk.shape[1]] += blk
            cnt[: blk.shape[0], : blk.shape[1]] += 1.0
    return out / cnt


def box_downsample(tape: Tape, src) -> Buffer:
    """2x2 box filter with ceil halving; adjoint is the exact transpose."""
    sv = value_of(src)
    h, w, ch = sv.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    cnt = np.zeros((oh, ow, 1))
    out_v = np.zeros((oh, ow, ch))
    for si in (0, 1):
        for sj in (0, 1):
            blk = sv[si::2, sj::2]
            out_v[: blk.shape[0], : blk.shape[1]] += blk
            cnt[: blk.shape[0], : blk.shape[1]] += 1.0
    out_v /= cnt
    out = Buffer(out_v)

    def backward():
        if not is_buffer(src):
            return
        g = out.grad / cnt
        for si in (0, 1):
            for sj in (0, 1):
                blk = src.grad[si::2, sj::2]
                blk += g[: blk.shape[0], : blk.shape[1]]

    tape.record_backward(backward)
    return out


def _wrap_coords(t, n, wrap):
    """Continuous texel coordinate -> (i0, i1, frac, dcoord_dt)."""
    if wrap == "repeat":
        i0 = np.floor(t).astype(np.int64)
        frac = t - i0
        return i0 % n, (i0 + 1) % n, frac, np.ones_like(t)
    if wrap == "clamp":
        tc = np.clip(t, 0.0, float(n - 1))
        i0 = np.floor(tc).astype(np.int64)
        i0 = np.minimum(i0, n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = tc - i0
        dmask = ((t > 0.0) & (t < n - 1)).astype(np.float64)
        return i0, i1, frac, dmask
    raise ValueError(f"unknown wrap mode: {wrap!r}")


def bilinear_sample(tape: Tape, level, uv, wrap: str = "clamp", with_uv_grad: bool = True) -> Buffer:
    """Bilinear fetch of (N, 2) uv coordinates from an (H, W, C) level.

    Texel (i, j) is centered at uv = ((j+0.5)/W, (i+0.5)/H); uv (0,0) is the
    top-left corner.  Adjoints scatter into the four source texels and, when
    uv is a Buffer, into the coordinates.
    """
    lv = value_of(level)
    uvv = value_of(uv)
    if not np.all(np.isfinite(uvv)):
        raise ValueError("non-finite texture coordinates")
    h, w, ch = lv.shape
    tx = uvv[:, 0] * w - 0.5
    ty = uvv[:, 1] * h - 0.5
    j0, j1, fx, mx = _wrap_coords(tx, w, wrap)
    i0, i1, fy, my = _wrap_coords(ty, h, wrap)

    t00 = lv[i0, j0]
    t10 = lv[i0, j1]
    t01 = lv[i1, j0]
    t11 = lv[i1, j1]
    fx1 = fx[:, None]
    fy1 = fy[:, None]
    out_v = (
        (1 - fy1) * ((1 - fx1) * t00 + fx1 * t10)
        + fy1 * ((1 - fx1) * t01 + fx1 * t11)
    )
    out = Buffer(out_v)

    def backward():
        g = out.grad
        if is_buffer(level):
            lg = level.grad
            np.add.at(lg, (i0, j0), (1 - fy1) * (1 - fx1) * g)
            np.add.at(lg, (i0, j1), (1 - fy1) * fx1 * g)
            np.add.at(lg, (i1, j0), fy1 * (1 - fx1) * g)
            np.add.at(lg, (i1, j1), fy1 * fx1 * g)
        if with_uv_grad and is_buffer(uv):
            dfx = np.sum(g * ((1 - fy1) * (t10 - t00) + fy1 * (t11 - t01)), axis=1)
            dfy = np.sum(g * ((1 - fx1) * (t01 - t00) + fx1 * (t11 - t10)), axis=1)
            uv.grad[:, 0] += dfx * mx * w
            uv.grad[:, 1] += dfy * my * h

    tape.record_backward(backward)
    return out


def scatter_rows(tape: Tape, values, idx: np.ndarray, n: int) -> Buffer:
    """Place rows (M, C) at integer row indices into an (n, C) zero buffer."""
    vv = value_of(values)
    out_v = np.zeros((n, vv.shape[-1]))
    out_v[idx] = vv
    out = Buffer(out_v)

    def backward():
        if is_buffer(values):
            values.grad += out.grad[idx]

    tape.record_backward(backward)
    return out


def texture_sample(tape: Tape, pyramid: TexturePyramid, uv, lod=None, wrap: str = "clamp") -> Buffer:
    """Bilinear fetch at level 0, or trilinear when per-pixel lod is given.

    Trilinear fetches blend the two bracketing levels; adjoints reach only
    the texels the fetch touched (and level 0 through the box-filter
    transpose when the pyramid is derived).
    """
    levels = pyramid.level_buffers(tape)
    if lod is None:
        return bilinear_sample(tape, levels[0], uv, wrap=wrap)
    lod = np.clip(np.asarray(lod, dtype=np.float64), 0.0, len(levels) - 1)
    l0 = np.floor(lod).astype(np.int64)
    l0 = np.minimum(l0, len(levels) - 1)
    l1 = np.minimum(l0 + 1, len(levels) - 1)
    frac = lod - l0

    n = len(value_of(uv))
    out = None
    for lev in np.unique(np.concatenate([l0, l1])):
        w_lev = np.where(l0 == lev, 1.0 - frac, 0.0) + np.where((l1 == lev) & (frac > 0), frac, 0.0)
        sel = np.flatnonzero(w_lev > 0.0)
        if len(sel) == 0:
            continue
        uv_sel = value_of(uv)[sel]
        if is_buffer(uv):
            uv_sel_buf = _gather_uv(tape, uv, sel)
        else:
            uv_sel_buf = uv_sel
        s = bilinear_sample(tape, levels[lev], uv_sel_buf, wrap=wrap)
        ws = ops.mul(tape, s, w_lev[sel][:, None])
        contrib = scatter_rows(tape, ws, sel, n)
        out = contrib if out is None else ops.add(tape, out, contrib)
    if out is None:
        out = Buffer(np.zeros((n, pyramid.channels)))
    return out


def _gather_uv(tape: Tape, uv, sel: np.ndarray) -> Buffer:
    out = Buffer(uv.values[sel])

    def backward():
        np.add.at(uv.grad, sel, out.grad)

    tape.record_backward(backward)
    return out


def msaa_rasterize(tape: Tape, ndc, faces, resolution, samples: int, valid=None) -> RasterOutput:
    """Multisampled visibility with single shading sample per pixel.

    The winning triangle is the nearest one at the pixel center, or the
    plurality winner over the sample pattern when the center is uncovered
    (ties to the lower index).  Coverage is the covered-sample fraction of
    the winner; barycentrics are evaluated at the center and clamped to the
    simplex.
    """
    if samples not in MSAA_PATTERNS:
        raise ValueError(f"samples must be one of {sorted(MSAA_PATTERNS)}")
    base = rasterize(tape, ndc, faces, resolution, valid=valid)
    if samples == 1:
        base.coverage = base.mask.astype(np.float64)
        return base

    width, height = base.width, base.height
    nv = value_of(ndc)
    faces = np.asarray(faces, dtype=np.int64)
    keep = np.ones(len(faces), dtype=bool)
    if valid is not None:
        keep = valid[faces].all(axis=1)
    tri_ids = np.flatnonzero(keep)
    tris = faces[tri_ids]

    winners = np.stack(
        [
            _resolve_coverage(nv[:, :2], nv[:, 2], tris, tri_ids, width, height, offset=off)[0]
            for off in MSAA_PATTERNS[samples]
        ],
        axis=0,
    )  # (S, H, W)

    final = base.tri_map.copy()
    center_bg = final < 0
    if center_bg.any():
        # plurality among covered sample winners; sorted ascending, so strict
        # comparison keeps the lowest id on count ties
        sub = np.sort(winners[:, center_bg], axis=0)  # (S, M)
        run_id = sub[0]
        run_cnt = np.ones(sub.shape[1], dtype=np.int64)
        best_id = np.where(run_id >= 0, run_id, -1)
        best_cnt = (run_id >= 0).astype(np.int64)
        for s in range(1, sub.shape[0]):
            same = sub[s] == run_id
            run_cnt = np.where(same, run_cnt + 1, 1)
            run_id = sub[s]
            better = (run_id >= 0) & (run_cnt > best_cnt)
            best_cnt = np.where(better, run_cnt, best_cnt)
            best_id = np.where(better, run_id, best_id)
        final[center_bg] = best_id

    coverage = np.mean(winners == final[None, :, :], axis=0)
    coverage[final < 0] = 0.0

    pix = np.flatnonzero(final.ravel() >= 0)
    tri = final.ravel()[pix].astype(np.int64)
    i0, i1, i2 = faces[tri, 0], faces[tri, 1], faces[tri, 2]
    a, b, c = nv[i0, :2], nv[i1, :2], nv[i2, :2]
    pj = pix % width
    pi = pix // width
    px = (pj + 0.5) * 2.0 / width - 1.0
    py = 1.0 - (pi + 0.5) * 2.0 / height
    u, v, du, dv = _barycentric_partials(a, b, c, px, py)

    # clamp to the simplex (plurality winners may put the center outside);
    # the projection stays differentiable through its exact jacobian
    u_cl = np.clip(u, 0.0, 1.0)
    v_cl = np.clip(v, 0.0, 1.0)
    s = u_cl + v_cl
    over = s > 1.0
    inv_s = np.where(over, 1.0 / np.maximum(s, 1e-12), 1.0)
    u_fin = u_cl * inv_s
    v_fin = v_cl * inv_s
    mu = (u >= 0.0) & (u <= 1.0)
    mv = (v >= 0.0) & (v <= 1.0)

    bu = Buffer(u_fin)
    bv = Buffer(v_fin)

    def backward():
        if not is_buffer(ndc):
            return
        gu_f, gv_f = bu.grad, bv.grad
        gu_cl = np.where(over, (gu_f - gv_f) * v_cl * inv_s * inv_s, gu_f)
        gv_cl = np.where(over, (gv_f - gu_f) * u_cl * inv_s * inv_s, gv_f)
        gu = gu_cl * mu
        gv = gv_cl * mv
        idx = np.concatenate([i0, i1, i2])
        gx = np.concatenate(
            [gu * du[k + "x"] + gv * dv[k + "x"] for k in ("a", "b", "c")]
        )
        gy = np.concatenate(
            [gu * du[k + "y"] + gv * dv[k + "y"] for k in ("a", "b", "c")]
        )
        np.add.at(ndc.grad[:, 0], idx, gx)
        np.add.at(ndc.grad[:, 1], idx, gy)

    tape.record_backward(backward)
    depth_map = base.depth_map
    return RasterOutput(
        width=width, height=height, tri_map=final, depth_map=depth_map,
        pix=pix, tri=tri, bary_u=bu, bary_v=bv, coverage=coverage,
    )


def depth_peel(tape: Tape, ndc, faces, resolution, passes: int = 8, valid=None) -> list[RasterOutput]:
    """Front-to-back depth layers; each pass keeps fragments strictly behind
    the previous layer's depth at that pixel.  Always returns ``passes``
    layers; exhausted layers carry background ids."""
    if passes < 1:
        raise ValueError("need at least one pass")
    layers = []
    depth_min = None
    for _ in range(passes):
        r = rasterize(tape, ndc, faces, resolution, depth_min=depth_min, valid=valid)
        layers.append(r)
        depth_min = r.depth_map
    return layers


def build_edge_map(faces: np.ndarray) -> dict:
    """Unordered edge -> adjacent face indices; static per topology."""
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fidx, (va, vb, vc) in enumerate(np.asarray(faces, dtype=np.int64)):
        for p, q in ((va, vb), (vb, vc), (vc, va)):
            key = (p, q) if p < q else (q, p)
            edge_faces.setdefault(key, []).append(fidx)
    return edge_faces


def antialias(
    tape: Tape,
    image,
    rast: RasterOutput,
    ndc,
    faces: np.ndarray,
    edge_map: dict | None = None,
    debug_blends: list | None = None,
) -> Buffer:
    """Analytic silhouette blending between adjacent pixel pairs.

    For each horizontally (then vertically) adjacent pixel pair with
    different triangle ids where a silhouette edge of either pixel's
    triangle (an edge unshared, or shared only with opposite-facing
    triangles) crosses the segment between the pixel centers at parameter
    t (0 at the first pixel), both pixels become t*cA + (1-t)*cB.  The
    crossing parameter is an analytic function of the two projected edge
    endpoints, so vertex positions receive gradients.  Pairs are processed
    horizontally first, then vertically, in row-major order, each blend
    reading the current image state.  Pixels not adjacent to an id boundary
    pass through bit-identically.
    """
    iv = value_of(image)
    h, w = iv.shape[:2]
    nv = value_of(ndc)
    faces = np.asarray(faces, dtype=np.int64)
    tri_map = rast.tri_map
    if edge_map is None:
        edge_map = build_edge_map(faces)

    # facing by signed NDC area; silhouettes per face recomputed every call
    a2 = nv[faces[:, 0], :2]
    b2 = nv[faces[:, 1], :2]
    c2 = nv[faces[:, 2], :2]
    facing = (
        (b2[:, 0] - a2[:, 0]) * (c2[:, 1] - a2[:, 1])
        - (b2[:, 1] - a2[:, 1]) * (c2[:, 0] - a2[:, 0])
    ) >= 0.0

    sil_edges: dict[int, list[tuple[int, int]]] = {}
    for key, adj in edge_map.items():
        for fidx in adj:
            silhouette = len(adj) == 1 or any(
                facing[o] != facing[fidx] for o in adj if o != fidx
            )
            if silhouette:
                sil_edges.setdefault(fidx, []).append(key)
    has_sil = np.zeros(len(faces) + 1, dtype=bool)  # slot -1 = background
    for fidx in sil_edges:
        has_sil[fidx] = True

    def crossing(fidx, p0x, p0y, p1x, p1y, horizontal):
        """First silhouette edge of face ``fidx`` crossing the segment."""
        for lo, hi in sil_edges.get(fidx, ()):
            q0x, q0y = nv[lo, 0], nv[lo, 1]
            q1x, q1y = nv[hi, 0], nv[hi, 1]
            if horizontal:
                denom = q1y - q0y
                if abs(denom) < 1e-15:
                    continue
                s = (p0y - q0y) / denom
                if not (0.0 <= s <= 1.0):
                    continue
                t = (q0x + s * (q1x - q0x) - p0x) / (p1x - p0x)
            else:
                denom = q1x - q0x
                if abs(denom) < 1e-15:
                    continue
                s = (p0x - q0x) / denom
                if not (0.0 <= s <= 1.0):
                    continue
                t = (q0y + s * (q1y - q0y) - p0y) / (p1y - p0y)
            if 0.0 <= t <= 1.0:
                return lo, hi, s, t
        return None

    # candidate pairs: differing ids and at least one silhouette-bearing side
    pairs = []
    ta = tri_map[:, :-1]
    tb = tri_map[:, 1:]
    cand = (ta != tb) & (has_sil[ta] | has_sil[tb])
    for k in np.flatnonzero(cand.ravel()):
        pi, pj = divmod(int(k), w - 1)
        pairs.append((pi, pj, pi, pj + 1, True))
    ta = tri_map[:-1, :]
    tb = tri_map[1:, :]
    cand = (ta != tb) & (has_sil[ta] | has_sil[tb])
    for k in np.flatnonzero(cand.ravel()):
        pi, pj = divmod(int(k), w)
        pairs.append((pi, pj, pi + 1, pj, False))

    work = iv.copy()
    blends = []
    sx = 2.0 / w
    sy = 2.0 / h
    for ia, ja, ib, jb, horizontal in pairs:
        fa = int(tri_map[ia, ja])
        fb = int(tri_map[ib, jb])
        p0x = (ja + 0.5) * sx - 1.0
        p0y = 1.0 - (ia + 0.5) * sy
        p1x = (jb + 0.5) * sx - 1.0
        p1y = 1.0 - (ib + 0.5) * sy
        hit = None
        for fidx in (fa, fb):
            if fidx < 0:
                continue
            hit = crossing(fidx, p0x, p0y, p1x, p1y, horizontal)
            if hit is not None:
                break
        if hit is None:
            continue
        lo, hi, s, t = hit
        a_old = work[ia, ja].copy()
        b_old = work[ib, jb].copy()
        blended = t * a_old + (1.0 - t) * b_old
        work[ia, ja] = blended
        work[ib, jb] = blended
        blends.append((ia, ja, ib, jb, t, a_old, b_old, lo, hi, s, horizontal, (p0x, p0y, p1x, p1y)))

    if debug_blends is not None:
        debug_blends.extend(blends)
    out = Buffer(work)

    def backward():
        g = out.grad.copy()
        for ia, ja, ib, jb, t, a_old, b_old, lo, hi, s, horizontal, seg in reversed(blends):
            p0x, p0y, p1x, p1y = seg
            g_val = g[ia, ja] + g[ib, jb]
            g[ia, ja] = t * g_val
            g[ib, jb] = (1.0 - t) * g_val
            if is_buffer(ndc):
                g_t = float(np.sum(g_val * (a_old - b_old)))
                q0x, q0y = nv[lo, 0], nv[lo, 1]
                q1x, q1y = nv[hi, 0], nv[hi, 1]
                if horizontal:
                    span = p1x - p0x
                    denom = q1y - q0y
                    ds_dq0y = (p0y - q1y) / (denom * denom)
                    ds_dq1y = -(p0y - q0y) / (denom * denom)
                    dt_dq0x = (1.0 - s) / span
                    dt_dq1x = s / span
                    dxs = q1x - q0x
                    dt_dq0y = dxs * ds_dq0y / span
                    dt_dq1y = dxs * ds_dq1y / span
                else:
                    span = p1y - p0y
                    denom = q1x - q0x
                    ds_dq0x = (p0x - q1x) / (denom * denom)
                    ds_dq1x = -(p0x - q0x) / (denom * denom)
                    dt_dq0y = (1.0 - s) / span
                    dt_dq1y = s / span
                    dys = q1y - q0y
                    dt_dq0x = dys * ds_dq0x / span
                    dt_dq1x = dys * ds_dq1x / span
                ndc.grad[lo, 0] += g_t * dt_dq0x
                ndc.grad[lo, 1] += g_t * dt_dq0y
                ndc.grad[hi, 0] += g_t * dt_dq1x
                ndc.grad[hi, 1] += g_t * dt_dq1y
        if is_buffer(image):
            image.grad += g

    tape.record_backward(backward)
    return out
