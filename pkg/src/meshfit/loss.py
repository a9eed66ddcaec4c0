"""Image losses, the combined objective, schedules, and reporting metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .adjoint import Buffer, Tape, is_buffer, value_of
from .shading import tone_map_values, tone_map_deriv_values

K_LAMBDA = 1e-6
K_LR = 0.0002
LAMBDA_HEURISTIC_SCALE = 0.25
LAMBDA_MIN_FRACTION = 0.02


@dataclass
class ScheduleState:
    """Regularizer weight decay and learning-rate schedule bookkeeping."""

    lambda_0: float
    lambda_min: float
    lr_0: float
    lambda_current: float = None
    k_lambda: float = K_LAMBDA
    k_lr: float = K_LR
    t: int = 0

    def __post_init__(self):
        if self.lambda_current is None:
            self.lambda_current = self.lambda_0

    def advance(self) -> float:
        """Move to the next iteration; returns the new regularizer weight."""
        self.t += 1
        self.lambda_current = step_lambda(self)
        return self.lambda_current

    @property
    def lr(self) -> float:
        return lr_at(self.t, self.lr_0, self.k_lr)


def step_lambda(schedule: ScheduleState) -> float:
    """One decay step: (previous - min) * 10^(-k t) + min at iteration t."""
    lam = (schedule.lambda_current - schedule.lambda_min) * 10.0 ** (
        -schedule.k_lambda * schedule.t
    ) + schedule.lambda_min
    return lam


def lr_at(t: int, lr_0: float, k: float = K_LR) -> float:
    if t < 0:
        raise ValueError("iteration must be non-negative")
    return lr_0 * 10.0 ** (-k * t)


def init_lambda(initial_image_loss: float, initial_laplacian_loss: float, user_override: float | None = None):
    """Initial regularizer weight and its floor.

    Heuristic: a quarter of the image-to-laplacian loss ratio at the start;
    the floor is 2% of the initial weight.
    """
    if user_override is not None:
        lam0 = float(user_override)
    else:
        if initial_laplacian_loss <= 0.0:
            raise ValueError("zero initial laplacian loss: an explicit weight is required")
        lam0 = LAMBDA_HEURISTIC_SCALE * initial_image_loss / initial_laplacian_loss
    return lam0, LAMBDA_MIN_FRACTION * lam0


def l1_tonemapped(tape: Tape, img, ref) -> Buffer:
    """Mean absolute difference of tone-mapped images; adjoint into img only."""
    iv = value_of(img)
    rv = value_of(ref)
    if iv.shape != rv.shape:
        raise ValueError(f"image shapes differ: {iv.shape} vs {rv.shape}")
    if np.any(iv < 0) or np.any(rv < 0):
        raise ValueError("loss inputs must be non-negative (linear radiance)")
    ti = tone_map_values(iv)
    tr = tone_map_values(rv)
    out = Buffer(np.mean(np.abs(ti - tr)))
    sgn = np.sign(ti - tr)
    deriv = tone_map_deriv_values(iv)
    n = iv.size

    def backward():
        if is_buffer(img):
            img.grad += (float(out.grad) / n) * sgn * deriv

    tape.record_backward(backward)
    return out


def mse(tape: Tape, img, ref) -> Buffer:
    """Mean squared difference on linear values; adjoint into img only."""
    iv = value_of(img)
    rv = value_of(ref)
    if iv.shape != rv.shape:
        raise ValueError(f"image shapes differ: {iv.shape} vs {rv.shape}")
    d = iv - rv
    out = Buffer(np.mean(d * d))
    n = iv.size

    def backward():
        if is_buffer(img):
            img.grad += (float(out.grad) * 2.0 / n) * d

    tape.record_backward(backward)
    return out


LOSSES = {"l1_tonemapped": l1_tonemapped, "mse": mse}


def objective(tape: Tape, image_loss, laplacian_loss, schedule: ScheduleState) -> Buffer:
    """Combined scalar: image loss plus the scheduled laplacian weight."""
    lam = schedule.lambda_current
    il = value_of(image_loss)
    ll = value_of(laplacian_loss)
    out = Buffer(il + lam * ll)

    def backward():
        g = out.grad
        if is_buffer(image_loss):
            image_loss.grad += g
        if is_buffer(laplacian_loss):
            laplacian_loss.grad += lam * g

    tape.record_backward(backward)
    return out


def psnr(img: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError("psnr requires equal shapes")
    m = float(np.mean((img - ref) ** 2))
    if m == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / m)


def tonemapped_psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """PSNR on tone-mapped 0-1 images with peak 1 (display-domain metric)."""
    return psnr(tone_map_values(img), tone_map_values(ref), peak=1.0)


def sample_surface(positions: np.ndarray, faces: np.ndarray, count: int, rng) -> np.ndarray:
    """Uniform-area point samples on a triangle mesh surface."""
    p = np.asarray(positions, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    a, b, c = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    probs = areas / total
    tri = rng.choice(len(f), size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return w0[:, None] * a[tri] + w1[:, None] * b[tri] + w2[:, None] * c[tri]


def chamfer_l1(mesh_a, mesh_b, sample_count: int = 100_000, seed: int = 0) -> float:
    """Symmetric mean nearest-point distance between surface samples."""
    if sample_count < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    pa = sample_surface(mesh_a.positions, mesh_a.faces, sample_count, rng)
    pb = sample_surface(mesh_b.positions, mesh_b.faces, sample_count, rng)
    da = cKDTree(pb).query(pa, k=1)[0]
    db = cKDTree(pa).query(pb, k=1)[0]
    return 0.5 * (float(da.mean()) + float(db.mean()))
