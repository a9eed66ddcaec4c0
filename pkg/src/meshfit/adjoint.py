"""Parameter storage and the forward/backward contract for pipeline stages.

The render pipeline is a fixed sequence of stages (mesh operators,
rasterization, shading, losses).  During the forward pass each stage records
a backward closure on a :class:`Tape`; running the tape in reverse order
accumulates adjoints into ``Buffer.grad``.  This is deliberately not a
general autodiff system: only the fixed pipeline stages carry adjoints, and
every analytic adjoint is validated against central finite differences via
:func:`fd_check`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Buffer:
    """A value array paired with an adjoint accumulator of the same shape."""

    __slots__ = ("values", "grad")

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        self.values = v
        self.grad = np.zeros_like(v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.values.shape})"


class ParamTensor(Buffer):
    """A named, optionally learnable leaf of the latent representation."""

    __slots__ = ("name", "learnable")

    def __init__(self, name: str, values, learnable: bool = True):
        super().__init__(values)
        self.name = name
        self.learnable = learnable

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.values.shape}, learnable={self.learnable})"


class ParamRegistry:
    """Ordered collection of uniquely named parameters.

    One fit loop owns a registry; it is never mutated concurrently.
    Iteration order equals registration order.
    """

    def __init__(self):
        self._params: dict[str, ParamTensor] = {}

    def register(self, name: str, shape, init=0.0, learnable: bool = True) -> ParamTensor:
        """Allocate a parameter.

        ``init`` may be a scalar, an array of matching total size, or a
        callable mapping the shape to an array.
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"parameter {name!r} has a zero or negative extent: {shape}")
        if callable(init):
            values = np.asarray(init(shape), dtype=np.float64).reshape(shape)
        elif np.isscalar(init):
            values = np.full(shape, float(init))
        else:
            values = np.asarray(init, dtype=np.float64).reshape(shape)
        p = ParamTensor(name, values, learnable=learnable)
        self._params[name] = p
        return p

    def adopt(self, param: ParamTensor) -> ParamTensor:
        """Insert an existing ParamTensor under its own name."""
        if param.name in self._params:
            raise ValueError(f"duplicate parameter name: {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def learnable(self):
        return [p for p in self._params.values() if p.learnable]

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()


def zero_grads(registry: ParamRegistry) -> None:
    registry.zero_grads()


class Tape:
    """Records backward closures in forward order and replays them reversed.

    Closures must only *accumulate* (+=) into ``Buffer.grad``; they never
    overwrite.  Accumulation order within a pass is therefore fixed by the
    recording order, which keeps runs bit-reproducible.
    """

    def __init__(self, record: bool = True):
        self._ops: list[Callable[[], None]] = []
        self.record = record

    def record_backward(self, fn: Callable[[], None]) -> None:
        if self.record:
            self._ops.append(fn)

    def backward(self, output: Buffer | None = None, seed=1.0) -> None:
        """Seed ``output.grad`` (accumulating) and replay the tape reversed."""
        if output is not None:
            output.grad = output.grad + np.broadcast_to(
                np.asarray(seed, dtype=np.float64), output.values.shape
            )
        for fn in reversed(self._ops):
            fn()

    def __len__(self):
        return len(self._ops)


def constant(x) -> np.ndarray:
    """Mark an input as non-differentiable (plain array)."""
    return np.asarray(x, dtype=np.float64)


def is_buffer(x) -> bool:
    return isinstance(x, Buffer)


def value_of(x) -> np.ndarray:
    return x.values if isinstance(x, Buffer) else np.asarray(x, dtype=np.float64)


@dataclass
class Stage:
    """A differentiable pipeline stage, packaged for finite-difference checks.

    ``forward`` maps a list of input arrays to one output array (pure).
    ``vjp`` maps (inputs, output adjoint) to the list of input adjoints.
    ``signature``, when present, returns a discrete descriptor of the forward
    pass (e.g. the triangle-id map); coordinates whose perturbation changes
    the signature are coverage-discontinuous and excluded from smooth checks.
    """

    forward: Callable[[Sequence[np.ndarray]], np.ndarray]
    vjp: Callable[[Sequence[np.ndarray], np.ndarray], list[np.ndarray]]
    signature: Callable[[Sequence[np.ndarray]], np.ndarray] | None = None
    name: str = ""


def stage_from_builder(builder, name: str = "", signature=None) -> Stage:
    """Wrap ``builder(tape, *input_buffers) -> Buffer`` into a Stage."""

    def forward(inputs):
        tape = Tape(record=False)
        return np.array(builder(tape, *[Buffer(x) for x in inputs]).values)

    def vjp(inputs, out_adjoint):
        tape = Tape()
        bufs = [Buffer(x) for x in inputs]
        out = builder(tape, *bufs)
        tape.backward(out, np.asarray(out_adjoint, dtype=np.float64))
        return [b.grad.copy() for b in bufs]

    return Stage(forward=forward, vjp=vjp, signature=signature, name=name)


@dataclass
class FdReport:
    """Outcome of one finite-difference sweep over sampled coordinates."""

    stage_name: str
    rel_errors: list[tuple[int, int, float]] = field(default_factory=list)
    discontinuous: list[tuple[int, int]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e for _, _, e in self.rel_errors), default=0.0)

    def fraction_within(self, tol: float) -> float:
        if not self.rel_errors:
            return 1.0
        ok = sum(1 for _, _, e in self.rel_errors if e <= tol)
        return ok / len(self.rel_errors)

    def __str__(self):
        return (
            f"[{self.stage_name or 'stage'}] max rel err {self.max_rel_error:.3e} "
            f"over {len(self.rel_errors)} smooth coords "
            f"({len(self.discontinuous)} discontinuous)"
        )


def fd_check(
    stage: Stage,
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-4,
    sample_count: int = 64,
    rng: np.random.Generator | None = None,
) -> FdReport:
    """Compare analytic adjoints of ``stage`` against central differences.

    A random fixed projection w turns the output into the scalar
    F(x) = sum(w * forward(x)); the analytic dF/dx comes from one vjp call
    and each sampled input coordinate is probed with a central difference.
    Relative error is |analytic - numeric| / max(|numeric|, 1e-6).
    Coordinates where the discrete signature flips between the two perturbed
    evaluations are reported separately, not folded into the max.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = rng or np.random.default_rng(0)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    y0 = stage.forward(inputs)
    if not np.all(np.isfinite(y0)):
        raise ValueError(f"non-finite forward output in stage {stage.name!r}")
    w = rng.standard_normal(y0.shape)

    analytic = stage.vjp(inputs, w)

    coords = [(i, c) for i, x in enumerate(inputs) for c in range(x.size)]
    if len(coords) > sample_count:
        idx = rng.choice(len(coords), size=sample_count, replace=False)
        coords = [coords[int(k)] for k in sorted(idx)]

    def scalar(xs):
        return float(np.sum(w * stage.forward(xs)))

    report = FdReport(stage_name=stage.name)
    for i, c in coords:
        xp = [x.copy() for x in inputs]
        xm = [x.copy() for x in inputs]
        xp[i].flat[c] += epsilon
        xm[i].flat[c] -= epsilon
        if stage.signature is not None:
            sp = stage.signature(xp)
            sm = stage.signature(xm)
            if sp.shape != sm.shape or not np.array_equal(sp, sm):
                report.discontinuous.append((i, c))
                continue
        numeric = (scalar(xp) - scalar(xm)) / (2.0 * epsilon)
        a = float(analytic[i].flat[c])
        rel = abs(a - numeric) / max(abs(numeric), 1e-6)
        report.rel_errors.append((i, c, rel))
    return report
