"""Differentiable mesh operations applied before rasterization.

Normals, tangent frames, uniform Laplacian regularization, linear-blend
skinning with softmax weights, edge-midpoint subdivision, and displacement
along the interpolated normal.  All operators take a Tape plus Buffers so
position gradients flow end to end.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .adjoint import Buffer, Tape, is_buffer, value_of
from . import ops


@dataclass
class Mesh:
    """Indexed triangle mesh with separately indexed texture coordinates."""

    positions: np.ndarray                      # (V, 3)
    faces: np.ndarray                          # (F, 3) int
    uvs: np.ndarray | None = None              # (T, 2)
    uv_faces: np.ndarray | None = None         # (F, 3) int
    skin_logits: np.ndarray | None = None      # (V, B)
    initial_differentials: np.ndarray | None = None  # (V, 3)
    _neighbors: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.uv_faces is not None:
            self.uv_faces = np.asarray(self.uv_faces, dtype=np.int32).reshape(-1, 3)
        self.validate()

    def validate(self):
        if self.faces.size and self.faces.max() >= len(self.positions):
            raise ValueError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        if self.uv_faces is not None:
            if self.uvs is None:
                raise ValueError("uv_faces without uvs")
            if self.uv_faces.shape != self.faces.shape:
                raise ValueError("uv_faces shape must match faces")
            if self.uv_faces.size and self.uv_faces.max() >= len(self.uvs):
                raise ValueError("uv face index out of range")
        if self.skin_logits is not None and len(self.skin_logits) != len(self.positions):
            raise ValueError("skin_logits must have one row per vertex")

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "Mesh":
        return Mesh(
            positions=self.positions.copy(),
            faces=self.faces.copy(),
            uvs=None if self.uvs is None else self.uvs.copy(),
            uv_faces=None if self.uv_faces is None else self.uv_faces.copy(),
            skin_logits=None if self.skin_logits is None else self.skin_logits.copy(),
            initial_differentials=(
                None if self.initial_differentials is None else self.initial_differentials.copy()
            ),
        )

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (min, max) index pairs."""
        e = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]], axis=0
        )
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def vertex_neighbors(self):
        """One-ring neighborhoods as flat (owner, neighbor) pairs plus degrees."""
        if self._neighbors is None:
            e = self.edges()
            owner = np.concatenate([e[:, 0], e[:, 1]])
            nbr = np.concatenate([e[:, 1], e[:, 0]])
            order = np.lexsort((nbr, owner))
            owner, nbr = owner[order], nbr[order]
            deg = np.bincount(owner, minlength=self.num_vertices).astype(np.float64)
            object.__setattr__(self, "_neighbors", (owner, nbr, deg))
        return self._neighbors

    def vertex_uvs(self) -> np.ndarray:
        """Representative uv per vertex (first wedge encountered, face order)."""
        if self.uvs is None or self.uv_faces is None:
            raise ValueError("mesh has no texture coordinates")
        vuv = np.zeros((self.num_vertices, 2))
        seen = np.zeros(self.num_vertices, dtype=bool)
        flat_v = self.faces.ravel()
        flat_t = self.uv_faces.ravel()
        # reversed so earlier wedges win the final write
        for v, t in zip(flat_v[::-1], flat_t[::-1]):
            vuv[v] = self.uvs[t]
            seen[v] = True
        if not seen.all():
            vuv[~seen] = 0.0
        return vuv

    def bounding_sphere(self):
        center = 0.5 * (self.positions.min(axis=0) + self.positions.max(axis=0))
        radius = float(np.linalg.norm(self.positions - center, axis=1).max())
        return center, radius

    def capture_initial_differentials(self):
        tape = Tape(record=False)
        d = uniform_laplacian(tape, Buffer(self.positions), self)
        self.initial_differentials = d.values.copy()


@dataclass
class BoneSet:
    """Per-frame rigid/affine bone transform palettes."""

    transforms: np.ndarray  # (num_frames, B, 4, 4)

    def __post_init__(self):
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        if self.transforms.ndim != 4 or self.transforms.shape[2:] != (4, 4):
            raise ValueError("transforms must have shape (frames, bones, 4, 4)")
        bottom = self.transforms[:, :, 3, :]
        if not np.allclose(bottom, np.array([0.0, 0.0, 0.0, 1.0]), atol=1e-12):
            raise ValueError("bone transforms must be affine (bottom row 0,0,0,1)")

    @property
    def num_bones(self) -> int:
        return self.transforms.shape[1]

    @property
    def num_frames(self) -> int:
        return self.transforms.shape[0]


def compute_vertex_normals(tape: Tape, positions, mesh: Mesh) -> Buffer:
    """Area-weighted smooth vertex normals, differentiable in positions.

    Vertices whose incident faces are all degenerate fall back to (0,0,1)
    and receive zero gradient.
    """
    f = mesh.faces
    pv = value_of(positions)
    e1 = pv[f[:, 1]] - pv[f[:, 0]]
    e2 = pv[f[:, 2]] - pv[f[:, 0]]
    face_n = np.cross(e1, e2)  # magnitude = 2 x face area

    acc = np.zeros_like(pv)
    for k in range(3):
        np.add.at(acc, f[:, k], face_n)

    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    bad = norm[:, 0] < 1e-20
    safe = np.where(norm < 1e-20, 1.0, norm)
    nrm = acc / safe
    if np.any(bad):
        nrm[bad] = (0.0, 0.0, 1.0)
    out = Buffer(nrm)

    def backward():
        if not is_buffer(positions):
            return
        g = out.grad
        g_acc = (g - nrm * np.sum(nrm * g, axis=1, keepdims=True)) / safe
        if np.any(bad):
            g_acc = g_acc.copy()
            g_acc[bad] = 0.0
        g_face = g_acc[f[:, 0]] + g_acc[f[:, 1]] + g_acc[f[:, 2]]
        g_e1 = np.cross(e2, g_face)
        g_e2 = np.cross(g_face, e1)
        np.add.at(positions.grad, f[:, 1], g_e1)
        np.add.at(positions.grad, f[:, 2], g_e2)
        np.add.at(positions.grad, f[:, 0], -(g_e1 + g_e2))

    tape.record_backward(backward)
    return out


def compute_tangent_frame(tape: Tape, positions, normals, mesh: Mesh):
    """Per-vertex tangent and bitangent from positions and texture coordinates.

    Face tangents solve the 2x2 uv system, accumulate to vertices, then are
    Gram-Schmidt orthogonalized against the vertex normal.  The bitangent is
    sign * (n x t) with the sign taken from the accumulated frame handedness.
    Faces with degenerate uv area are skipped; vertices left without any
    contribution get an arbitrary unit tangent orthogonal to the normal.
    """
    if mesh.uvs is None or mesh.uv_faces is None:
        raise ValueError("tangent frame requires texture coordinates")
    f = mesh.faces
    tf = mesh.uv_faces
    uv = mesh.uvs
    pv = value_of(positions)
    nv = value_of(normals)

    e1 = pv[f[:, 1]] - pv[f[:, 0]]
    e2 = pv[f[:, 2]] - pv[f[:, 0]]
    d1 = uv[tf[:, 1]] - uv[tf[:, 0]]
    d2 = uv[tf[:, 2]] - uv[tf[:, 0]]
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    valid = np.abs(det) > 1e-12
    r = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)[:, None]

    t_face = r * (d2[:, 1:2] * e1 - d1[:, 1:2] * e2)
    b_face = r * (d1[:, 0:1] * e2 - d2[:, 0:1] * e1)

    t_acc = np.zeros_like(pv)
    b_acc = np.zeros_like(pv)
    for k in range(3):
        np.add.at(t_acc, f[:, k], t_face)
        np.add.at(b_acc, f[:, k], b_face)

    # Gram-Schmidt against the vertex normal
    proj = np.sum(t_acc * nv, axis=1, keepdims=True)
    t_orth = t_acc - proj * nv
    norm = np.linalg.norm(t_orth, axis=1, keepdims=True)
    bad = norm[:, 0] < 1e-9
    safe = np.where(norm < 1e-9, 1.0, norm)
    t_unit = t_orth / safe
    # vertices whose accumulated tangent degenerates (no valid uv faces, or a
    # cancelling fan) fall back to a fixed axis crossed with the normal; the
    # fallback stays differentiable in the normal
    alt = np.where(np.abs(nv[:, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    fb_raw = np.cross(nv, alt)
    fb_norm = np.linalg.norm(fb_raw, axis=1, keepdims=True)
    fb_norm = np.where(fb_norm < 1e-20, 1.0, fb_norm)
    fb_unit = fb_raw / fb_norm
    if np.any(bad):
        t_unit[bad] = fb_unit[bad]

    n_cross_t = np.cross(nv, t_unit)
    sign = np.where(np.sum(n_cross_t * b_acc, axis=1, keepdims=True) < 0.0, -1.0, 1.0)
    b_unit = sign * n_cross_t

    tangent = Buffer(t_unit)
    bitangent = Buffer(b_unit)

    def backward():
        g_t = tangent.grad.copy()
        g_b = bitangent.grad

        # bitangent = sign * (n x t); sign is locally constant
        g_n_from_b = np.cross(t_unit, sign * g_b)
        g_t += np.cross(sign * g_b, nv)

        # normalize
        g_orth = (g_t - t_unit * np.sum(t_unit * g_t, axis=1, keepdims=True)) / safe
        if np.any(bad):
            g_orth = g_orth.copy()
            g_orth[bad] = 0.0

        # t_orth = t_acc - (t_acc . n) n
        g_tacc = g_orth - nv * np.sum(nv * g_orth, axis=1, keepdims=True)
        g_n = g_n_from_b - proj * g_orth - t_acc * np.sum(nv * g_orth, axis=1, keepdims=True)
        if np.any(bad):
            # fallback rows: t = normalize(n x alt)
            g_fb = (g_t - t_unit * np.sum(t_unit * g_t, axis=1, keepdims=True)) / fb_norm
            g_n_fb = np.cross(alt, g_fb)
            g_n = g_n.copy()
            g_n[bad] = g_n_from_b[bad] + g_n_fb[bad]
        if is_buffer(normals):
            normals.grad += g_n

        if is_buffer(positions):
            g_tface = g_tacc[f[:, 0]] + g_tacc[f[:, 1]] + g_tacc[f[:, 2]]
            g_e1 = r * d2[:, 1:2] * g_tface
            g_e2 = -r * d1[:, 1:2] * g_tface
            np.add.at(positions.grad, f[:, 1], g_e1)
            np.add.at(positions.grad, f[:, 2], g_e2)
            np.add.at(positions.grad, f[:, 0], -(g_e1 + g_e2))

    tape.record_backward(backward)
    return tangent, bitangent


def uniform_laplacian(tape: Tape, positions, mesh: Mesh) -> Buffer:
    """Per-vertex differential: vertex minus the mean of its one-ring."""
    owner, nbr, deg = mesh.vertex_neighbors()
    pv = value_of(positions)
    isolated = deg == 0
    if np.any(isolated):
        warnings.warn("mesh has isolated vertices; their differential is zero")
    safe_deg = np.where(isolated, 1.0, deg)[:, None]

    sums = np.zeros_like(pv)
    np.add.at(sums, owner, pv[nbr])
    delta = pv - sums / safe_deg
    if np.any(isolated):
        delta[isolated] = 0.0
    out = Buffer(delta)

    def backward():
        if not is_buffer(positions):
            return
        g = out.grad.copy()
        if np.any(isolated):
            g[isolated] = 0.0
        positions.grad += g
        np.add.at(positions.grad, nbr, -(g / safe_deg)[owner])

    tape.record_backward(backward)
    return out


def laplacian_loss(tape: Tape, positions, mesh: Mesh, mode: str = "absolute") -> Buffer:
    """Mean squared deviation of the uniform differential from its rest value.

    ``relative`` compares against the stored initial differentials of the
    input mesh; ``absolute`` compares against zero.
    """
    if mode not in ("relative", "absolute"):
        raise ValueError(f"unknown laplacian mode: {mode!r}")
    delta = uniform_laplacian(tape, positions, mesh)
    if mode == "relative":
        if mesh.initial_differentials is None:
            raise ValueError("relative laplacian mode requires captured initial differentials")
        ref = mesh.initial_differentials
    else:
        ref = np.zeros(1)
    diff = ops.sub(tape, delta, ref)
    n = mesh.num_vertices
    sq = ops.square(tape, diff)
    total = ops.sum_all(tape, sq)
    return ops.scale(tape, total, 1.0 / n)


def skin_weights(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of unconstrained skinning logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def skin(tape: Tape, positions, logits, bones: BoneSet, frame: int) -> Buffer:
    """Linear-blend skinning with per-vertex softmax weights.

    Bone transforms are constants during optimization; gradients flow to
    positions and to the weight logits.
    """
    if bones.num_bones == 0:
        raise ValueError("skinning requires at least one bone")
    if not (0 <= frame < bones.num_frames):
        raise ValueError(f"frame {frame} out of range (0..{bones.num_frames - 1})")
    pv = value_of(positions)
    lv = value_of(logits)
    m = bones.transforms[frame]        # (B, 4, 4)
    a = m[:, :3, :3]                   # (B, 3, 3)
    t = m[:, :3, 3]                    # (B, 3)

    w = skin_weights(lv)                                        # (V, B)
    trans = np.einsum("bij,vj->bvi", a, pv) + t[:, None, :]     # (B, V, 3)
    out_v = np.einsum("vb,bvi->vi", w, trans)
    out = Buffer(out_v)

    def backward():
        g = out.grad
        if is_buffer(logits):
            s = np.einsum("vi,bvi->vb", g, trans)
            logits.grad += w * (s - np.sum(w * s, axis=1, keepdims=True))
        if is_buffer(positions):
            g_trans = w.T[:, :, None] * g[None, :, :]           # (B, V, 3)
            positions.grad += np.einsum("bvi,bij->vj", g_trans, a)

    tape.record_backward(backward)
    return out


class SubdivisionPlan:
    """Precomputed topology of one edge-midpoint split.

    The tessellated connectivity is fixed; midpoint positions are recomputed
    from the current endpoints on every application so gradients propagate.
    Shared edges map to a single midpoint keyed by the unordered index pair.
    """

    def __init__(self, mesh: Mesh):
        self.base_vertices = mesh.num_vertices
        self.pos_edges, self.faces = self._split(mesh.faces, mesh.num_vertices)
        if mesh.uvs is not None and mesh.uv_faces is not None:
            self.uv_edges, self.uv_faces = self._split(mesh.uv_faces, len(mesh.uvs))
            self.base_uvs = len(mesh.uvs)
        else:
            self.uv_edges = None
            self.uv_faces = None
            self.base_uvs = 0

    @staticmethod
    def _split(faces: np.ndarray, n: int):
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        edges, inverse = np.unique(e, axis=0, return_inverse=True)
        mid = n + inverse.reshape(3, -1).T  # columns: mid(ab), mid(bc), mid(ca)
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        mab, mbc, mca = mid[:, 0], mid[:, 1], mid[:, 2]
        new_faces = np.concatenate(
            [
                np.stack([a, mab, mca], axis=1),
                np.stack([b, mbc, mab], axis=1),
                np.stack([c, mca, mbc], axis=1),
                np.stack([mab, mbc, mca], axis=1),
            ],
            axis=0,
        ).astype(np.int32)
        return edges, new_faces

    def apply_positions(self, tape: Tape, positions) -> Buffer:
        """Original vertices followed by edge midpoints, gradients intact."""
        pv = value_of(positions)
        e0, e1 = self.pos_edges[:, 0], self.pos_edges[:, 1]
        out_v = np.concatenate([pv, 0.5 * (pv[e0] + pv[e1])], axis=0)
        out = Buffer(out_v)
        nb = self.base_vertices

        def backward():
            if not is_buffer(positions):
                return
            positions.grad += out.grad[:nb]
            g_mid = 0.5 * out.grad[nb:]
            np.add.at(positions.grad, e0, g_mid)
            np.add.at(positions.grad, e1, g_mid)

        tape.record_backward(backward)
        return out

    def apply_static(self, arr: np.ndarray, edges: np.ndarray) -> np.ndarray:
        return np.concatenate([arr, 0.5 * (arr[edges[:, 0]] + arr[edges[:, 1]])], axis=0)


def subdivide(mesh: Mesh) -> Mesh:
    """One edge-midpoint subdivision: each triangle becomes four."""
    plan = SubdivisionPlan(mesh)
    positions = plan.apply_static(mesh.positions, plan.pos_edges)
    uvs = uv_faces = None
    if plan.uv_edges is not None:
        uvs = plan.apply_static(mesh.uvs, plan.uv_edges)
        uv_faces = plan.uv_faces
    logits = None
    if mesh.skin_logits is not None:
        logits = plan.apply_static(mesh.skin_logits, plan.pos_edges)
    return Mesh(positions=positions, faces=plan.faces, uvs=uvs, uv_faces=uv_faces, skin_logits=logits)


def displace(tape: Tape, positions, normals, displacement_level0, vertex_uvs: np.ndarray, wrap: str = "clamp") -> Buffer:
    """Move each vertex along its normal by the sampled displacement value.

    The lookup is the bilinear texture primitive at the finest level.
    Gradients reach the base positions (through both the vertex and the
    normal) and the displacement texels; uvs are fixed.
    """
    from .raster import bilinear_sample

    d = bilinear_sample(tape, displacement_level0, np.asarray(vertex_uvs), wrap=wrap, with_uv_grad=False)
    if d.values.shape[-1] != 1:
        raise ValueError("displacement texture must be single-channel")
    offset = ops.mul(tape, d, normals)
    return ops.add(tape, positions, offset)
