"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the fitting engine is a :class:`DiffArray`.
Operations are evaluated eagerly and appended to the owning :class:`Tape`
together with a vector-Jacobian product for each parent, so a single reverse
sweep yields gradients of a scalar energy with respect to all leaves.

Arrays that are not attached to a tape (``node_id is None``) are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tape",
    "DiffArray",
    "forward",
    "backward",
    "check_gradient",
    "gradient_errors",
    "const",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "sigmoid", "tanh",
    "exp", "log", "abs_", "power", "sqrt", "sum_", "mean", "l1_norm", "l2_norm",
    "dot", "broadcast_to", "reshape", "transpose", "getitem", "gather",
    "clamp", "concat", "stack", "softplus", "normalize", "cross",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, kind: str, node: int, detail: str):
        super().__init__(f"{kind} (node {node}): {detail}")
        self.kind = kind
        self.node = node


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of a computation.

    ``nodes[i].parents`` only ever refers to ids ``< i``; values live in
    ``values`` at the same index.
    """

    nodes: list[_Node] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "DiffArray":
        data = np.array(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, name))
        self.values.append(data)
        return DiffArray(data, self, nid)

    def _record(self, kind, data, parents: Sequence["DiffArray"], vjp) -> "DiffArray":
        ids = tuple(p.node_id for p in parents)
        nid = len(self.nodes)
        self.nodes.append(_Node(kind, ids, vjp))
        self.values.append(data)
        return DiffArray(data, self, nid)

    def is_leaf(self, x: "DiffArray") -> bool:
        return x.tape is self and x.node_id is not None and self.nodes[x.node_id].kind == "leaf"

    def backward(self, output: "DiffArray", wrt: Mapping[str, "DiffArray"] | Sequence["DiffArray"]):
        """Gradients of the scalar ``output`` with respect to leaves ``wrt``.

        Returns a dict when ``wrt`` is a mapping, otherwise a list.
        """
        if output.tape is not self or output.node_id is None:
            raise AutodiffError("output is not recorded on this tape")
        if output.data.size != 1:
            raise AutodiffError(f"output must be scalar, got shape {output.shape}")
        items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
        for key, x in items:
            if not isinstance(x, DiffArray) or x.node_id is None or x.tape is not self:
                raise AutodiffError(f"cannot differentiate with respect to constant {key!r}")
            if not self.is_leaf(x):
                raise AutodiffError(f"{key!r} is not a leaf of the tape")

        grads: list[np.ndarray | None] = [None] * (output.node_id + 1)
        grads[output.node_id] = np.ones_like(output.data)
        for nid in range(output.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.vjp is None:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg

        def _grad(x):
            g = grads[x.node_id] if x.node_id < len(grads) else None
            return np.zeros_like(x.data) if g is None else np.asarray(g, dtype=np.float64).reshape(x.shape)

        if isinstance(wrt, Mapping):
            return {k: _grad(x) for k, x in items}
        return [_grad(x) for _, x in items]


class DiffArray:
    """A float64 array optionally tracked by a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 1000

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return self.node_id is None

    def __repr__(self) -> str:
        tag = "const" if self.node_id is None else f"node={self.node_id}"
        return f"DiffArray(shape={self.shape}, {tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# helpers

def const(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _tape_of(*xs: DiffArray) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None and x.node_id is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise AutodiffError("operands recorded on different tapes")
    return tape


def _make(kind: str, data: np.ndarray, parents: Sequence[DiffArray], vjp) -> DiffArray:
    tape = _tape_of(*parents)
    if tape is None:
        return DiffArray(data)
    tracked = [p if p.node_id is not None else DiffArray(p.data) for p in parents]

    # constants never receive gradients; drop them from the parent list
    live = [i for i, p in enumerate(tracked) if p.node_id is not None]
    if len(live) == len(parents):
        return tape._record(kind, data, tracked, vjp)

    def live_vjp(g):
        out = vjp(g)
        return [out[i] for i in live]

    return tape._record(kind, data, [tracked[i] for i in live], live_vjp)


def _next_id(*xs: DiffArray) -> int:
    tape = _tape_of(*xs)
    return -1 if tape is None else len(tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_shape(kind: str, a: DiffArray, b: DiffArray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, _next_id(a, b), f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> DiffArray:
    a, b = const(a), const(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffArray:
    a, b = const(a), const(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffArray:
    a, b = const(a), const(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> DiffArray:
    a, b = const(a), const(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> DiffArray:
    a = const(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> DiffArray:
    a, b = const(a), const(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", _next_id(a, b), f"incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _make("matmul", ad @ bd, (a, b), vjp)


def dot(a, b) -> DiffArray:
    a, b = const(a), const(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", _next_id(a, b), f"expected equal 1-d shapes, got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    return _make("dot", np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


# ---------------------------------------------------------------------------
# elementwise unary

def relu(a) -> DiffArray:
    a = const(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> DiffArray:
    a = const(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> DiffArray:
    a = const(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> DiffArray:
    a = const(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> DiffArray:
    a = const(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> DiffArray:
    a = const(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def power(a, p: float) -> DiffArray:
    """``a ** p`` for a constant exponent ``p``."""
    a = const(a)
    if isinstance(p, DiffArray):
        raise AutodiffError("power: exponent must be a constant scalar")
    p = float(p)
    ad = a.data
    out = ad ** p
    if p == 0.0:
        return _make("power", out, (a,), lambda g: (np.zeros_like(ad),))

    def vjp(g):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (2.0 * g * ad,)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * ad ** (p - 1.0)
        return (g * np.where(np.isfinite(d), d, 0.0),)

    return _make("power", out, (a,), vjp)


def sqrt(a) -> DiffArray:
    return power(a, 0.5)


def clamp(a, lo: float | None = None, hi: float | None = None) -> DiffArray:
    a = const(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad > lo
    if hi is not None:
        inside &= ad < hi
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def softplus(a) -> DiffArray:
    return log(add(exp(a), 1.0))


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = const(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = const(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def l1_norm(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = const(a)
    shape = a.shape
    sign = np.sign(a.data)
    out = np.sum(np.abs(a.data), axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * sign,)

    return _make("l1_norm", np.asarray(out), (a,), vjp)


def l2_norm(a, axis=None, keepdims: bool = False) -> DiffArray:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    a = const(a)
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    safe = np.where(out > 0, out, 1.0)
    scale = np.where(out > 0, 1.0 / safe, 0.0)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * ad.ndim)
        return (g * ad * scale,)

    res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis=axis))
    return _make("l2_norm", np.asarray(res), (a,), vjp)


# ---------------------------------------------------------------------------
# structural

def broadcast_to(a, shape) -> DiffArray:
    a = const(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", _next_id(a), f"cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _make("broadcast", np.array(out), (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> DiffArray:
    a = const(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", _next_id(a), f"cannot reshape {src} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (np.reshape(g, src),))


def transpose(a, axes=None) -> DiffArray:
    a = const(a)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> DiffArray:
    """Basic slicing (ints, slices, ellipsis, newaxis)."""
    a = const(a)
    shape = a.shape
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", _next_id(a), str(exc)) from None

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make("slice", np.array(out), (a,), vjp)


def _scatter_rows(g: np.ndarray, index: np.ndarray, nrows: int) -> np.ndarray:
    idx = index.reshape(-1)
    rows = g.reshape(idx.size, -1)
    width = rows.shape[1]
    if width == 1:
        return np.bincount(idx, weights=rows[:, 0], minlength=nrows).reshape(nrows, 1)
    flat = (idx[:, None] * width + np.arange(width)).reshape(-1)
    return np.bincount(flat, weights=rows.reshape(-1), minlength=nrows * width).reshape(nrows, width)


def gather(a, index) -> DiffArray:
    """Select rows ``a[index]`` along axis 0; the backward pass scatter-adds."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0] if a.ndim else 0
    if a.ndim == 0 or (index.size and (index.min() < -n or index.max() >= n)):
        raise ShapeError("gather", _next_id(a), f"index out of range for axis 0 of size {n}")
    index = np.where(index < 0, index + n, index)
    shape = a.shape

    def vjp(g):
        return (_scatter_rows(g, index, shape[0]).reshape(shape),)

    return _make("gather", a.data[index], (a,), vjp)


def concat(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [const(x) for x in arrays]
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", _next_id(*arrays), str(exc)) from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return _make("concat", out, arrays, lambda g: np.split(g, bounds, axis=axis))


def stack(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [const(x) for x in arrays]
    try:
        out = np.stack([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", _next_id(*arrays), str(exc)) from None
    n = len(arrays)
    return _make("stack", out, arrays,
                 lambda g: [np.take(g, i, axis=axis) for i in range(n)])


# ---------------------------------------------------------------------------
# small composites used throughout the renderer

def normalize(a, axis: int = -1) -> DiffArray:
    """Scale vectors along ``axis`` to unit length."""
    return div(a, l2_norm(a, axis=axis, keepdims=True))


def cross(a, b) -> DiffArray:
    """Cross product of (..., 3) arrays."""
    a, b = const(a), const(b)
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


# ---------------------------------------------------------------------------
# driver functions

def forward(fn: Callable[..., DiffArray], inputs: Mapping[str, np.ndarray], tape: Tape | None = None):
    """Record ``fn(**leaves)`` on a tape.

    Returns ``(tape, leaves, output)`` where ``leaves`` maps each input name
    to its leaf :class:`DiffArray`.
    """
    tape = Tape() if tape is None else tape
    leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
    return tape, leaves, fn(**leaves)


def backward(tape: Tape, output: DiffArray, wrt: Mapping[str, DiffArray]) -> dict[str, np.ndarray]:
    return tape.backward(output, wrt)


def _scalar(fn, inputs) -> float:
    out = fn(**{k: DiffArray(v) for k, v in inputs.items()})
    val = float(const(out).data.reshape(-1)[0])
    if not np.isfinite(val):
        raise AutodiffError("non-finite value while probing")
    return val


def gradient_errors(
    fn: Callable[..., DiffArray],
    point: Mapping[str, np.ndarray],
    h: float = 1e-4,
    eps: float = 1e-8,
    names: Iterable[str] | None = None,
    skip: Callable[[str, int, int], bool] | None = None,
) -> dict[str, np.ndarray]:
    """Per-coordinate relative error between analytic and central-difference gradients.

    ``skip(name, flat_index, sign)`` may veto a probe (e.g. a visibility
    change); vetoed coordinates are reported as NaN.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    tape, leaves, out = forward(fn, point)
    if not np.all(np.isfinite(out.data)):
        raise AutodiffError("non-finite value while probing")
    names = list(point) if names is None else list(names)
    grads = tape.backward(out, {k: leaves[k] for k in names})
    errors = {}
    for name in names:
        base = point[name]
        ana = grads[name].reshape(-1)
        err = np.empty(base.size)
        for i in range(base.size):
            if skip is not None and (skip(name, i, +1) or skip(name, i, -1)):
                err[i] = np.nan
                continue
            probe = dict(point)
            x = base.copy().reshape(-1)
            x[i] = base.reshape(-1)[i] + h
            probe[name] = x.reshape(base.shape)
            fp = _scalar(fn, probe)
            x[i] = base.reshape(-1)[i] - h
            probe[name] = x.reshape(base.shape)
            fm = _scalar(fn, probe)
            fd = (fp - fm) / (2.0 * h)
            err[i] = abs(ana[i] - fd) / (abs(fd) + eps)
        errors[name] = err.reshape(base.shape)
    return errors


def check_gradient(fn: Callable[..., DiffArray], point: Mapping[str, np.ndarray], h: float = 1e-4,
                   eps: float = 1e-8) -> float:
    """Max over all coordinates of ``|analytic - fd| / (|fd| + eps)``."""
    errs = gradient_errors(fn, point, h=h, eps=eps)
    vals = [e[np.isfinite(e)] for e in errs.values()]
    vals = [v for v in vals if v.size]
    return float(max(v.max() for v in vals)) if vals else 0.0
