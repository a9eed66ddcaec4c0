"""Deferred physically based shading.

Normal mapping, a diffuse lobe plus one isotropic GGX specular lobe with a
(gamma, roughness, metalness) control texture, back-to-front transparency
compositing, and the log/sRGB tone map applied before image losses.

Specular details follow the common real-time stack: GGX normal distribution
with alpha = roughness^2, height-correlated Smith masking, Schlick Fresnel
with F0 = (1-m)*0.04 + m*kd, and the diffuse lobe scaled by (1-m).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import Buffer, Tape, is_buffer, value_of
from . import ops
from .raster import TexturePyramid

R_MIN = 0.04          # roughness floor keeping the GGX denominator sane
_NDOT_EPS = 1e-6      # clamp for the specular denominator cosines

SRGB_THRESHOLD = 0.0031308
SRGB_A = 0.055


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray  # RGB radiometric scale

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(3)
        if np.any(self.intensity < 0):
            raise ValueError("light intensity must be non-negative")


@dataclass
class Material:
    """Texture set for the latent asset.

    kd is RGBA (alpha = transparency); orm packs (gamma, roughness,
    metalness).  The tangent-space normal map is stored in [0,1] with the
    (0.5, 0.5, 1) identity convention.  Clamp ranges are enforced after each
    optimizer step so texel values stay directly exportable.
    """

    kd: TexturePyramid
    orm: TexturePyramid
    normal_map: TexturePyramid | None = None
    displacement: TexturePyramid | None = None
    ambient: np.ndarray | None = None
    wrap: str = "clamp"

    def __post_init__(self):
        if self.kd.channels != 4:
            raise ValueError("kd texture must have 4 channels (RGB + alpha)")
        if self.orm.channels != 3:
            raise ValueError("orm texture must have 3 channels")
        if self.normal_map is not None and self.normal_map.channels != 3:
            raise ValueError("normal map must have 3 channels")
        if self.displacement is not None and self.displacement.channels != 1:
            raise ValueError("displacement map must be single-channel")
        if self.ambient is not None:
            self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)

    def pyramids(self):
        out = {"kd": self.kd, "orm": self.orm}
        if self.normal_map is not None:
            out["normal_map"] = self.normal_map
        if self.displacement is not None:
            out["displacement"] = self.displacement
        return out

    def clamp_(self):
        """Project texel values back into their valid ranges in place."""
        for name, pyr in self.pyramids().items():
            for level in pyr._levels:
                v = value_of(level)
                if name == "kd":
                    np.clip(v, 0.0, 1.0, out=v)
                elif name == "orm":
                    np.clip(v, 0.0, 1.0, out=v)
                    np.clip(v[..., 1], R_MIN, 1.0, out=v[..., 1])
                elif name == "normal_map":
                    np.clip(v, 0.0, 1.0, out=v)
                # displacement is unbounded


def apply_normal_map(tape: Tape, normal, tangent, bitangent, sampled) -> Buffer:
    """Perturb the geometric normal by a tangent-space map sample.

    The map value decodes as 2m - 1; a degenerate decoded vector falls back
    to the geometric normal (zero gradient there).
    """
    m = ops.sub(tape, ops.scale(tape, sampled, 2.0), np.ones(3))
    mx = ops.slice_cols(tape, m, 0, 1)
    my = ops.slice_cols(tape, m, 1, 2)
    mz = ops.slice_cols(tape, m, 2, 3)
    world = ops.add(
        tape,
        ops.add(tape, ops.mul(tape, tangent, mx), ops.mul(tape, bitangent, my)),
        ops.mul(tape, normal, mz),
    )
    return ops.normalize_rows(tape, world, fallback=None)


def _ggx_d(tape: Tape, n_dot_h, alpha):
    """GGX normal distribution with alpha = roughness^2."""
    a2 = ops.square(tape, alpha)
    nh2 = ops.square(tape, n_dot_h)
    denom_core = ops.add(tape, ops.mul(tape, nh2, ops.sub(tape, a2, np.ones(1))), np.ones(1))
    denom = ops.scale(tape, ops.square(tape, denom_core), np.pi)
    return ops.div(tape, a2, denom)


def _smith_g_height_correlated(tape: Tape, n_dot_v, n_dot_l, alpha):
    """Height-correlated Smith masking-shadowing for GGX."""
    a2 = ops.square(tape, alpha)
    one = np.ones(1)

    def lam_term(mu):
        mu2 = ops.square(tape, mu)
        inner = ops.add(tape, a2, ops.mul(tape, ops.sub(tape, one, a2), mu2))
        return ops.sqrt(tape, inner)

    # G = 2 nl nv / (nv * sqrt(a^2 + (1-a^2) nl^2) + nl * sqrt(a^2 + (1-a^2) nv^2))
    num = ops.scale(tape, ops.mul(tape, n_dot_l, n_dot_v), 2.0)
    den = ops.add(
        tape,
        ops.mul(tape, n_dot_v, lam_term(n_dot_l)),
        ops.mul(tape, n_dot_l, lam_term(n_dot_v)),
    )
    return ops.div(tape, num, ops.clamp_min(tape, den, 1e-12))


def _schlick_fresnel(tape: Tape, f0, h_dot_v):
    base = ops.clamp_min(tape, ops.sub(tape, np.ones(1), h_dot_v), 0.0)
    b5 = ops.pow_const(tape, base, 5.0)
    return ops.add(tape, f0, ops.mul(tape, ops.sub(tape, np.ones(1), f0), b5))


def shade_deferred(
    tape: Tape,
    position,
    shading_normal,
    kd_sample,
    orm_sample,
    light: PointLight,
    camera_position: np.ndarray,
    ambient: np.ndarray | None = None,
):
    """Evaluate the BRDF per covered pixel.

    Returns (rgb radiance, alpha).  Radiance is
    [(1-m) kd/pi + (1-gamma) spec] * max(n.l, 0) * intensity/dist^2
    + ambient * kd, with spec = D*G*F / (4 max(n.l,eps) max(n.v,eps)) and
    F0 = (1-m)*0.04 + m*kd.  Alpha is kd's fourth channel.
    """
    kd_rgb = ops.slice_cols(tape, kd_sample, 0, 3)
    alpha_out = ops.slice_cols(tape, kd_sample, 3, 4)
    gamma = ops.slice_cols(tape, orm_sample, 0, 1)
    rough = ops.slice_cols(tape, orm_sample, 1, 2)
    metal = ops.slice_cols(tape, orm_sample, 2, 3)

    to_light = ops.sub(tape, light.position[None, :], position)
    dist2 = ops.rowdot(tape, to_light, to_light)
    w_l = ops.normalize_rows(tape, to_light)
    to_cam = ops.sub(tape, np.asarray(camera_position)[None, :], position)
    w_v = ops.normalize_rows(tape, to_cam)
    half = ops.normalize_rows(tape, ops.add(tape, w_l, w_v))

    n_dot_l_raw = ops.rowdot(tape, shading_normal, w_l)
    n_dot_l = ops.clamp_min(tape, n_dot_l_raw, 0.0)
    n_dot_v = ops.rowdot(tape, shading_normal, w_v)
    n_dot_h = ops.clamp_min(tape, ops.rowdot(tape, shading_normal, half), 0.0)
    h_dot_v = ops.clamp_min(tape, ops.rowdot(tape, half, w_v), 0.0)

    one = np.ones(1)
    one_minus_m = ops.sub(tape, one, metal)
    diffuse = ops.scale(tape, ops.mul(tape, one_minus_m, kd_rgb), 1.0 / np.pi)

    alpha_g = ops.square(tape, rough)
    d_term = _ggx_d(tape, n_dot_h, alpha_g)
    g_term = _smith_g_height_correlated(
        tape,
        ops.clamp_min(tape, n_dot_v, _NDOT_EPS),
        ops.clamp_min(tape, n_dot_l, _NDOT_EPS),
        alpha_g,
    )
    ks = ops.add(tape, ops.scale(tape, one_minus_m, 0.04), ops.mul(tape, metal, kd_rgb))
    f_term = _schlick_fresnel(tape, ks, h_dot_v)
    spec_denom = ops.scale(
        tape,
        ops.mul(
            tape,
            ops.clamp_min(tape, n_dot_l, _NDOT_EPS),
            ops.clamp_min(tape, n_dot_v, _NDOT_EPS),
        ),
        4.0,
    )
    spec = ops.div(tape, ops.mul(tape, ops.mul(tape, d_term, g_term), f_term), spec_denom)
    spec = ops.mul(tape, ops.sub(tape, one, gamma), spec)

    brdf = ops.add(tape, diffuse, spec)
    falloff = ops.div(tape, light.intensity[None, :], dist2)
    radiance = ops.mul(tape, ops.mul(tape, brdf, n_dot_l), falloff)
    if ambient is not None:
        radiance = ops.add(tape, radiance, ops.mul(tape, kd_rgb, np.asarray(ambient)[None, :]))

    if not np.all(np.isfinite(radiance.values)):
        bad = np.argwhere(~np.isfinite(radiance.values))
        raise FloatingPointError(f"non-finite radiance at covered pixel row {bad[0][0]}")
    return radiance, alpha_out


def blend_layers(tape: Tape, layers, background) -> Buffer:
    """Composite depth-peeled layers back-to-front over a background.

    ``layers`` is a front-to-back list of (color, alpha) image Buffers;
    the recurrence C <- a_p c_p + (1 - a_p) C runs from the last layer to
    the first and is differentiable in every color and alpha.
    """
    bg = np.asarray(value_of(background), dtype=np.float64)
    current = background if is_buffer(background) else Buffer(np.broadcast_to(bg, value_of(layers[0][0]).shape).copy())
    for color, alpha in reversed(layers):
        a = alpha if value_of(alpha).ndim == value_of(color).ndim else None
        if a is None:
            a = ops.reshape(tape, alpha, value_of(alpha).shape + (1,))
        term = ops.mul(tape, a, color)
        keep = ops.mul(tape, ops.sub(tape, np.ones(1), a), current)
        current = ops.add(tape, term, keep)
    return current


def srgb_transfer(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(
        x <= SRGB_THRESHOLD,
        12.92 * x,
        (1.0 + SRGB_A) * np.maximum(x, 1e-300) ** (1.0 / 2.4) - SRGB_A,
    )


def srgb_transfer_deriv(x: np.ndarray) -> np.ndarray:
    # the kink at the threshold takes the power-branch derivative
    x = np.asarray(x, dtype=np.float64)
    return np.where(
        x < SRGB_THRESHOLD,
        12.92,
        (1.0 + SRGB_A) / 2.4 * np.maximum(x, 1e-300) ** (1.0 / 2.4 - 1.0),
    )


def srgb_inverse(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.where(
        y <= 12.92 * SRGB_THRESHOLD,
        y / 12.92,
        ((y + SRGB_A) / (1.0 + SRGB_A)) ** 2.4,
    )


def tone_map_values(x: np.ndarray) -> np.ndarray:
    """log(1+x) range compression followed by the sRGB transfer."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("tone map input must be non-negative")
    return srgb_transfer(np.log1p(x))


def tone_map_deriv_values(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = np.log1p(x)
    return srgb_transfer_deriv(u) / (1.0 + x)


def tone_map(tape: Tape, x) -> Buffer:
    """Differentiable tone map; strictly monotone per channel."""
    xv = value_of(x)
    out = Buffer(tone_map_values(xv))
    deriv = tone_map_deriv_values(xv)

    def backward():
        if is_buffer(x):
            x.grad += out.grad * deriv

    tape.record_backward(backward)
    return out
