"""Tensor container, operation tape and reverse-mode differentiation.

A :class:`Tensor` is a thin wrapper around a contiguous numpy array.  While a
:class:`Tape` is active, every primitive in :mod:`histoformer.ops` that touches
a tensor with ``requires_grad`` appends a record holding its inputs, output and
a vector-Jacobian product closure.  :func:`backward` replays those records in
reverse order.

Example::

    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = backward(tape, loss)
    grads[x]  # array([0., 2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import StateError

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_local = threading.local()


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created float tensors.

    ``precision("float64")`` is the verification build; the default build is
    32-bit.
    """
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """Dense row-major array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


@dataclass
class Record:
    """One executed primitive: operands, result and its VJP closure.

    ``vjp`` maps the gradient of ``output`` to a tuple with one entry per
    input (``None`` where the input receives no gradient).
    """

    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered log of primitives executed while the tape is active.

    Used as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def ops_used(self) -> set:
        return {r.op for r in self.records}


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for validation passes inside a training tape."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


@contextlib.contextmanager
def watch_permutations():
    """Collect every sort permutation computed inside the block (used by :func:`grad_check`)."""
    log: list = []
    stack = getattr(_local, "perm_logs", None)
    if stack is None:
        stack = _local.perm_logs = []
    stack.append(log)
    try:
        yield log
    finally:
        stack.pop()


def note_permutation(indices: np.ndarray) -> None:
    stack = getattr(_local, "perm_logs", None)
    if stack:
        stack[-1].append(indices)


def record(op: str, inputs: tuple, out_data: np.ndarray, vjp) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log it on the active tape if needed.

    ``vjp`` is only invoked during :func:`backward`; it may be ``None`` for
    outputs that are never differentiated.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and vjp is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        tape.records.append(Record(op, inputs, out, vjp))
    return out


def backward(tape: Tape, loss: Tensor, seed=None, accumulate: bool = True) -> dict:
    """Reverse-mode sweep over ``tape`` starting from ``loss``.

    Returns a dict mapping every leaf tensor with ``requires_grad`` that was
    reached to its gradient array.  When ``accumulate`` is true the gradient
    is also added into ``leaf.grad``.  Permutation indices are constants here:
    gather/scatter route gradients, they never scale them.
    """
    if not tape.records:
        raise StateError("backward called on an empty tape; run a forward pass first")
    if not loss.requires_grad:
        raise StateError("loss was not produced by a recorded computation")
    if seed is None:
        if loss.size != 1:
            raise StateError(f"seed gradient required for non-scalar output of shape {loss.shape}")
        seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
    produced = {id(r.output) for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if key not in produced:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = grads[key]
        if g.shape != t.shape:
            raise StateError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
        out[t] = g
        if accumulate:
            t.grad = g.copy() if t.grad is None else t.grad + g
    return out


# (offset k, weight w): derivative = sum w * (f(x + k h) - f(x - k h)) / h
_STENCILS = {
    2: ((1.0, 0.5),),
    4: ((1.0, 8 / 12), (2.0, -1 / 12)),
}


def same_permutations(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, inputs, eps: float = 1e-5, max_coords=None, rng=None, oracle_dtype=None,
               only=None, order: int = 2, max_shrink: int = 6, rel_floor: float = 0.0):
    """Compare reverse-mode gradients of ``f`` with finite differences.

    ``f`` takes the tensors in ``inputs`` and returns a scalar Tensor.  Every
    coordinate of every input is probed unless ``max_coords`` caps the count
    per input, in which case coordinates are drawn with ``rng``.  ``only``
    restricts probing to the listed input positions.  The oracle is the
    central difference of ``order`` 2 or 4 and runs at ``oracle_dtype``
    (defaults to the inputs' dtype).

    Sorting makes ``f`` piecewise smooth.  A probe whose sort permutations
    differ from those at the unperturbed point straddles a piece boundary;
    its step is shrunk by 4x up to ``max_shrink`` times, after which the
    coordinate is skipped.

    When the oracle runs at another precision, both passes must sort
    identically at the unperturbed point, otherwise they differentiate
    different pieces and :class:`StateError` is raised.

    Returns ``(max_rel_err, details)`` with one ``(name, max_rel_err,
    probed, skipped)`` per probed input; the relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8, rel_floor * G)`` where
    ``G`` is the largest analytic gradient magnitude of that input.  A
    nonzero ``rel_floor`` stops roundoff on gradients far below the
    input's scale from dominating low-precision checks.
    """
    inputs = list(inputs)
    stencil = _STENCILS[order]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape, watch_permutations() as analytic_perms:
        out = f(*inputs)
    analytic = backward(tape, out, accumulate=False)
    rng = rng if rng is not None else np.random.default_rng(0)

    probes = inputs
    if oracle_dtype is not None:
        probes = [Tensor(t.data.astype(oracle_dtype)) for t in inputs]
    with no_grad(), watch_permutations() as base_perms:
        f(*probes)
    if not same_permutations(analytic_perms, base_perms):
        raise StateError("analytic and oracle passes sort differently at this point (near-tie at reduced precision)")

    def probe(flat, i, orig, h):
        total = 0.0
        for k, w in stencil:
            vals = []
            for sign in (1.0, -1.0):
                flat[i] = orig + sign * k * h
                with watch_permutations() as perms:
                    vals.append(f(*probes).data.item())
                if not same_permutations(perms, base_perms):
                    return None
            total += w * (vals[0] - vals[1])
        return total / h

    worst = 0.0
    details = []
    with no_grad():
        for pos, (t, p) in enumerate(zip(inputs, probes)):
            if only is not None and pos not in only:
                continue
            a_grad = analytic.get(t, np.zeros_like(t.data)).reshape(-1)
            floor = max(1e-8, rel_floor * float(np.abs(a_grad).max(initial=0.0)))
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            err_t, skipped = 0.0, 0
            for i in coords:
                orig = flat[i]
                h, num = eps, None
                for _ in range(max_shrink + 1):
                    num = probe(flat, i, orig, h)
                    if num is not None:
                        break
                    h /= 4
                flat[i] = orig
                if num is None:
                    skipped += 1
                    continue
                ana = float(a_grad[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                err_t = max(err_t, rel)
            details.append((t.name, err_t, len(coords) - skipped, skipped))
            worst = max(worst, err_t)
    return worst, details
