"""Dense-array tensors recorded on a tape for reverse-mode differentiation.

Every primitive expresses its vector-Jacobian product with other primitives,
so a backward sweep run with ``create_graph=True`` is itself recorded and can
be differentiated again (needed for the gradient penalty).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, c: power(self, c)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Op:
    name: str
    inputs: tuple
    out: Tensor
    vjp: Callable


class Tape:
    """Ordered record of primitive operations.

    Operations are appended as they execute, so the list is always in
    topological order. Gradient sweeps walk it backwards and visit each
    recorded operation at most once per sweep.
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def operations(self) -> list[str]:
        return [op.name for op in self._ops]

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True

    def _record(self, op: _Op) -> None:
        self._ops.append(op)
        self._outputs.add(id(op.out))

    def gradient(self, target: Tensor, sources: Sequence[Tensor] | Tensor,
                 seed: Tensor | np.ndarray | None = None,
                 create_graph: bool = False) -> list[Tensor] | Tensor:
        """Reverse sweep from ``target``; returns one gradient per source.

        Sources the target does not depend on receive zeros.
        """
        single = isinstance(sources, Tensor)
        srcs = [sources] if single else list(sources)
        if id(target) not in self._outputs and not any(s is target for s in srcs):
            raise RuntimeError("backward requested for a tensor that was not produced on this tape")
        if seed is None:
            seed_t = Tensor(np.ones_like(target.data))
        else:
            seed_t = as_tensor(seed)
            if seed_t.shape != target.shape:
                raise ShapeError(f"seed shape {seed_t.shape} does not match target {target.shape}")

        grads: dict[int, Tensor] = {id(target): seed_t}
        n = len(self._ops)
        if create_graph:
            _tape_stack().append(self)
        else:
            _tape_stack().append(None)
        try:
            for op in reversed(self._ops[:n]):
                g = grads.get(id(op.out))
                if g is None:
                    continue
                in_grads = op.vjp(g)
                for inp, ig in zip(op.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = ig if prev is None else add(prev, ig)
        finally:
            _tape_stack().pop()

        out = []
        for s in srcs:
            g = grads.get(id(s))
            out.append(g if g is not None else Tensor(np.zeros_like(s.data)))
        return out[0] if single else out


class no_record:
    """Context in which primitives run without recording."""

    def __enter__(self):
        _tape_stack().append(None)

    def __exit__(self, *exc):
        _tape_stack().pop()


def _make(name: str, data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(_Op(name, inputs, out, vjp))
    return out


# ---------------------------------------------------------------- broadcasting


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make("sum_to", _reduce_to_shape(x.data, shape), (x,),
                 lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as err:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from err
    return _make("broadcast_to", data, (x,), lambda g: (sum_to(g, src),))


def _binary_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from err


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                            sum_to(mul(g, a), b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)

    def vjp(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), vjp)


def power(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    if c == 1.0:
        return a
    return _make(f"pow{c:g}", np.power(a.data, c), (a,),
                 lambda g: (mul(g, mul(c, power(a, c - 1.0))),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    box = {}

    def vjp(g):
        return (mul(g, box["out"]),)

    out = _make("exp", np.exp(a.data), (a,), vjp)
    box["out"] = out
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def _masked(name: str, a: Tensor, data: np.ndarray, slope: np.ndarray) -> Tensor:
    # slope is held fixed under differentiation (frozen-switch convention)
    mask = Tensor(slope)
    return _make(name, data, (a,), lambda g: (mul(g, mask),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    return _masked("relu", a, np.where(pos, a.data, 0.0), pos.astype(np.float64))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    scaled = slope * a.data
    data = np.maximum(a.data, scaled) if 0.0 <= slope <= 1.0 else np.where(pos, a.data, scaled)
    return _masked("leaky_relu", a, data, np.where(pos, 1.0, slope))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _masked("abs", a, np.abs(a.data), np.sign(a.data))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _masked("clip", a, np.clip(a.data, lo, hi), inside.astype(np.float64))


# ---------------------------------------------------------------- reductions / layout


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    src = a.shape

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make("sum", data, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from err
    if data.shape == src:
        return a
    return _make("reshape", data, (a,), lambda g: (reshape(g, src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,),
                 lambda g: (transpose(g, inv),))


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing. Integer-array row selection uses gather_rows."""
    a = as_tensor(a)
    src = a.shape
    return _make("getitem", a.data[key].copy(), (a,),
                 lambda g: (_place(g, key, src),))


def _place(g, key, shape) -> Tensor:
    g = as_tensor(g)
    data = np.zeros(shape)
    data[key] = g.data
    gshape = g.shape
    return _make("place", data, (g,), lambda h: (reshape(getitem(h, key), gshape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        out = []
        for i in range(len(ts)):
            key = [slice(None)] * ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(key)))
        return tuple(out)

    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Rows ``a[idx]`` along axis 0 for an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _make("gather_rows", a.data[idx], (a,), lambda g: (scatter_rows(g, idx, n),))


def scatter_rows(g, idx: np.ndarray, n: int) -> Tensor:
    """Adjoint of gather_rows: accumulate rows of ``g`` into ``n`` slots."""
    g = as_tensor(g)
    data = np.zeros((n,) + g.shape[1:])
    np.add.at(data, idx, g.data)
    return _make("scatter_rows", data, (g,), lambda h: (gather_rows(h, idx),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b, exact: bool = False) -> Tensor:
    """2-D matrix product.

    ``exact=True`` uses a fixed-order kernel whose per-row result does not
    depend on how many rows are in the batch (BLAS does not guarantee that).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = np.einsum("nk,km->nm", a.data, b.data) if exact else a.data @ b.data

    def vjp(g):
        return (matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None)

    return _make("matmul", data, (a, b), vjp)


# ---------------------------------------------------------------- pooling


def segment_max(x, offsets: Sequence[int]) -> Tensor:
    """Channel-wise max over consecutive row segments of an (N, C) tensor.

    ``offsets`` holds segment starts plus the final end, e.g. [0, 5, 9].
    The gradient goes entirely to the (first) argmax row per channel.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"segment_max: expected (N, C) input, got {x.shape}")
    offsets = [int(o) for o in offsets]
    if offsets[0] != 0 or offsets[-1] != x.shape[0] or any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ShapeError(f"segment_max: invalid offsets {offsets} for {x.shape[0]} rows")
    nseg = len(offsets) - 1
    rows = np.empty((nseg, x.shape[1]), dtype=np.int64)
    for i in range(nseg):
        lo, hi = offsets[i], offsets[i + 1]
        rows[i] = lo + np.argmax(x.data[lo:hi], axis=0)
    cols = np.broadcast_to(np.arange(x.shape[1]), rows.shape)
    data = x.data[rows, cols]
    n = x.shape[0]
    return _make("segment_max", data, (x,), lambda g: (_scatter_cols(g, rows, n),))


def _scatter_cols(g, rows: np.ndarray, n: int) -> Tensor:
    g = as_tensor(g)
    cols = np.broadcast_to(np.arange(g.shape[1]), rows.shape)
    data = np.zeros((n, g.shape[1]))
    np.add.at(data, (rows, cols), g.data)
    return _make("scatter_cols", data, (g,), lambda h: (_gather_cols(h, rows),))


def _gather_cols(h, rows: np.ndarray) -> Tensor:
    h = as_tensor(h)
    cols = np.broadcast_to(np.arange(h.shape[1]), rows.shape)
    n = h.shape[0]
    return _make("gather_cols", h.data[rows, cols], (h,), lambda g: (_scatter_cols(g, rows, n),))


# ---------------------------------------------------------------- composites


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; a zero-variance row maps to zeros."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    y = xc * power(var + eps, -0.5)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def norm_rows(x, eps: float = 1e-12) -> Tensor:
    """Euclidean norm of each sample (axis 0 is the batch)."""
    x = as_tensor(x)
    flat = reshape(x, (x.shape[0], -1))
    return power(tsum(flat * flat, axis=1) + eps, 0.5)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def grad(fn: Callable[..., Tensor], *args) -> list[np.ndarray]:
    """Convenience: gradients of a scalar function wrt all positional arguments."""
    ins = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in args]
    with Tape() as tape:
        out = fn(*ins)
    return [g.data for g in tape.gradient(out, ins)]


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
