"""Differentiable elementwise / gather primitives shared by pipeline stages.

Every function takes a Tape plus Buffers (or plain arrays, treated as
constants) and returns a new Buffer.  Backward closures only accumulate into
``.grad`` of Buffer inputs.  Broadcasting follows numpy; adjoints of
broadcast operands are sum-reduced back to the operand shape.
"""
from __future__ import annotations

import numpy as np

from .adjoint import Buffer, Tape, is_buffer, value_of


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _acc(x, g):
    if is_buffer(x):
        x.grad += _unbroadcast(np.asarray(g), x.values.shape)


def add(tape: Tape, a, b) -> Buffer:
    out = Buffer(value_of(a) + value_of(b))

    def backward():
        _acc(a, out.grad)
        _acc(b, out.grad)

    tape.record_backward(backward)
    return out


def sub(tape: Tape, a, b) -> Buffer:
    out = Buffer(value_of(a) - value_of(b))

    def backward():
        _acc(a, out.grad)
        _acc(b, -out.grad)

    tape.record_backward(backward)
    return out


def mul(tape: Tape, a, b) -> Buffer:
    av, bv = value_of(a), value_of(b)
    out = Buffer(av * bv)

    def backward():
        _acc(a, out.grad * bv)
        _acc(b, out.grad * av)

    tape.record_backward(backward)
    return out


def div(tape: Tape, a, b) -> Buffer:
    av, bv = value_of(a), value_of(b)
    out = Buffer(av / bv)

    def backward():
        _acc(a, out.grad / bv)
        _acc(b, -out.grad * av / (bv * bv))

    tape.record_backward(backward)
    return out


def neg(tape: Tape, a) -> Buffer:
    out = Buffer(-value_of(a))

    def backward():
        _acc(a, -out.grad)

    tape.record_backward(backward)
    return out


def scale(tape: Tape, a, k: float) -> Buffer:
    out = Buffer(value_of(a) * k)

    def backward():
        _acc(a, out.grad * k)

    tape.record_backward(backward)
    return out


def sqrt(tape: Tape, a) -> Buffer:
    av = value_of(a)
    ov = np.sqrt(av)
    out = Buffer(ov)

    def backward():
        _acc(a, out.grad * 0.5 / np.maximum(ov, 1e-300))

    tape.record_backward(backward)
    return out


def square(tape: Tape, a) -> Buffer:
    av = value_of(a)
    out = Buffer(av * av)

    def backward():
        _acc(a, out.grad * 2.0 * av)

    tape.record_backward(backward)
    return out


def pow_const(tape: Tape, a, p: float) -> Buffer:
    av = value_of(a)
    out = Buffer(av**p)

    def backward():
        _acc(a, out.grad * p * av ** (p - 1.0))

    tape.record_backward(backward)
    return out


def clamp_min(tape: Tape, a, lo: float) -> Buffer:
    """max(a, lo); subgradient 0 on the clamped side, 1 at the boundary."""
    av = value_of(a)
    mask = av >= lo
    out = Buffer(np.maximum(av, lo))

    def backward():
        _acc(a, out.grad * mask)

    tape.record_backward(backward)
    return out


def rowdot(tape: Tape, a, b) -> Buffer:
    """Row-wise dot product of (..., K) arrays -> (..., 1)."""
    av, bv = value_of(a), value_of(b)
    out = Buffer(np.sum(av * bv, axis=-1, keepdims=True))

    def backward():
        _acc(a, out.grad * bv)
        _acc(b, out.grad * av)

    tape.record_backward(backward)
    return out


def cross_rows(tape: Tape, a, b) -> Buffer:
    """Row-wise 3D cross product a x b."""
    av, bv = value_of(a), value_of(b)
    out = Buffer(np.cross(av, bv))

    def backward():
        # <g, da x b> = <da, b x g>;  <g, a x db> = <db, g x a>
        _acc(a, np.cross(bv, out.grad))
        _acc(b, np.cross(out.grad, av))

    tape.record_backward(backward)
    return out


def normalize_rows(tape: Tape, a, fallback: np.ndarray | None = None, eps: float = 1e-20) -> Buffer:
    """Row-wise normalization with an optional fallback for near-zero rows.

    Fallback rows receive zero gradient (the forward value is constant there).
    """
    av = value_of(a)
    norm = np.linalg.norm(av, axis=-1, keepdims=True)
    bad = norm[..., 0] < eps
    safe = np.where(norm < eps, 1.0, norm)
    nv = av / safe
    if np.any(bad):
        if fallback is None:
            fallback = np.array([0.0, 0.0, 1.0])
        nv = nv.copy()
        nv[bad] = fallback
    out = Buffer(nv)

    def backward():
        g = out.grad
        ga = (g - nv * np.sum(nv * g, axis=-1, keepdims=True)) / safe
        if np.any(bad):
            ga = ga.copy()
            ga[bad] = 0.0
        _acc(a, ga)

    tape.record_backward(backward)
    return out


def gather_rows(tape: Tape, a, idx: np.ndarray) -> Buffer:
    """Index rows of (V, K) by an integer array; output shape idx.shape + (K,)."""
    av = value_of(a)
    out = Buffer(av[idx])

    def backward():
        if is_buffer(a):
            np.add.at(a.grad, idx, out.grad)

    tape.record_backward(backward)
    return out


def slice_cols(tape: Tape, a, j0: int, j1: int) -> Buffer:
    av = value_of(a)
    out = Buffer(av[..., j0:j1])

    def backward():
        if is_buffer(a):
            a.grad[..., j0:j1] += out.grad

    tape.record_backward(backward)
    return out


def concat_cols(tape: Tape, parts: list) -> Buffer:
    vals = [value_of(p) for p in parts]
    out = Buffer(np.concatenate(vals, axis=-1))
    offsets = np.cumsum([0] + [v.shape[-1] for v in vals])

    def backward():
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, out.grad[..., j0:j1])

    tape.record_backward(backward)
    return out


def reshape(tape: Tape, a, shape) -> Buffer:
    av = value_of(a)
    out = Buffer(av.reshape(shape))

    def backward():
        _acc(a, out.grad.reshape(av.shape))

    tape.record_backward(backward)
    return out


def mean_all(tape: Tape, a) -> Buffer:
    av = value_of(a)
    out = Buffer(av.mean())
    n = av.size

    def backward():
        _acc(a, np.full(av.shape, float(out.grad) / n))

    tape.record_backward(backward)
    return out


def sum_all(tape: Tape, a) -> Buffer:
    av = value_of(a)
    out = Buffer(av.sum())

    def backward():
        _acc(a, np.full(av.shape, float(out.grad)))

    tape.record_backward(backward)
    return out


def scatter_to_image(tape: Tape, values, pix: np.ndarray, h: int, w: int) -> Buffer:
    """Place per-pixel rows (N, C) at linear row-major pixel indices into (h, w, C)."""
    vv = value_of(values)
    channels = vv.shape[-1] if vv.ndim > 1 else 1
    img = np.zeros((h * w, channels))
    img[pix] = vv.reshape(len(pix), channels)
    out = Buffer(img.reshape(h, w, channels) if vv.ndim > 1 else img.reshape(h, w))

    def backward():
        if is_buffer(values):
            g = out.grad.reshape(h * w, channels)
            values.grad += g[pix].reshape(values.values.shape)

    tape.record_backward(backward)
    return out


def gather_from_image(tape: Tape, image, pix: np.ndarray) -> Buffer:
    """Inverse of scatter_to_image: read rows at linear pixel indices."""
    iv = value_of(image)
    h, w = iv.shape[:2]
    flat = iv.reshape(h * w, -1)
    out = Buffer(flat[pix])

    def backward():
        if is_buffer(image):
            g = image.grad.reshape(h * w, -1)
            np.add.at(g, pix, out.grad)

    tape.record_backward(backward)
    return out
