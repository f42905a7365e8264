"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

The op set is deliberately small: exactly what the transformer denoiser,
the output heads, and the uncertainty modules need. Values are stored as
row-major float32 numpy arrays; float64 never appears outside test oracles.

Gradients are computed by replaying the tape backwards. The tape is a pure
record: calling ``Tape.backward`` twice yields identical gradients, and
tensors that never made it onto the tape get zero gradients.
"""

from __future__ import annotations

import os
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericsError",
    "parameter",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "split",
    "narrow",
    "transpose",
    "reshape",
    "mean",
    "layer_norm",
    "softmax",
    "gelu",
    "sigmoid",
    "embedding",
    "apply_thread_limit",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NumericsError(FloatingPointError):
    """Raised when a non-finite value shows up where finiteness is required."""


class Tensor:
    """A float32 array plus a requires-grad flag.

    Tensors are value holders; all arithmetic goes through the module-level
    ops so it can be recorded on the active tape. Parameter tensors are
    mutated in place by the optimizer between steps, never during a taped
    forward pass.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def parameter(data) -> Tensor:
    """A trainable tensor."""
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeEntry:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops executed while the tape is active.

    Usage::

        with Tape() as tape:
            loss = ...
        grads = tape.backward(loss, model.parameters())
    """

    def __init__(self, check_finite: bool = False):
        self.entries: list[_TapeEntry] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every named parameter.

        Parameters that never appeared on the tape (or were unreachable from
        the loss) get a zero gradient of their own shape.
        """
        if loss.data.shape != ():
            raise ShapeError("backward", loss.data.shape)
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            for inp, ig in zip(entry.inputs, entry.vjp(g)):
                if ig is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig
        return {
            name: grads.get(id(p), np.zeros(p.data.shape, dtype=np.float32))
            for name, p in params.items()
        }


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            vjp_builder) -> Tensor:
    """Wrap op output; record on the active tape when gradients can flow."""
    if not _ACTIVE_TAPES:
        return Tensor(out_data)
    tape = _ACTIVE_TAPES[-1]
    if tape.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"{op}: non-finite values in output")
    needs = tuple(i.requires_grad for i in inputs)
    if not any(needs):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    tape.entries.append(_TapeEntry(op, inputs, out, vjp_builder(needs)))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over the leading axes added by suffix broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g.astype(np.float32, copy=False)


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape[len(a.shape) - len(b.shape):] != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (..., m, k) @ (k, n) and same-rank stacked
    (..., m, k) @ (..., k, n); no other broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim != 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def build(needs):
        def vjp(g):
            ga = gb = None
            if needs[0]:
                ga = g @ np.swapaxes(b.data, -1, -2)
            if needs[1]:
                if b.ndim == 2:
                    k = a.shape[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = np.swapaxes(a.data, -1, -2) @ g
            return ga, gb
        return vjp

    return _record("matmul", (a, b), out, build)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-suffix shape of ``a`` (bias)."""
    _check_suffix("add", a, b)
    out = a.data + b.data

    def build(needs):
        def vjp(g):
            ga = g if needs[0] else None
            gb = _sum_to_shape(g, b.shape) if needs[1] else None
            return ga, gb
        return vjp

    return _record("add", (a, b), out, build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a trailing-suffix shape of ``a``."""
    _check_suffix("mul", a, b)
    out = a.data * b.data

    def build(needs):
        def vjp(g):
            ga = g * b.data if needs[0] else None
            gb = _sum_to_shape(g * a.data, b.shape) if needs[1] else None
            return ga, gb
        return vjp

    return _record("mul", (a, b), out, build)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c32 = np.float32(c)
    out = a.data * c32

    def build(needs):
        return lambda g: (g * c32,)

    return _record("scale", (a,), out, build)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat")
    nd = xs[0].ndim
    ax = axis % nd
    ref = list(xs[0].shape)
    for x in xs:
        s = list(x.shape)
        if x.ndim != nd or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", *(t.shape for t in xs))
    out = np.concatenate([x.data for x in xs], axis=ax)
    sizes = [x.shape[ax] for x in xs]
    offs = np.cumsum([0] + sizes)

    def build(needs):
        def vjp(g):
            pieces = []
            for i, x in enumerate(xs):
                if not needs[i]:
                    pieces.append(None)
                    continue
                sl = [slice(None)] * nd
                sl[ax] = slice(offs[i], offs[i + 1])
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            return pieces
        return vjp

    return _record("concat", tuple(xs), out, build)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError("narrow", x.shape, (ax, start, length))
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    out = np.ascontiguousarray(x.data[tuple(sl)])

    def build(needs):
        def vjp(g):
            gx = np.zeros(x.shape, dtype=np.float32)
            gx[tuple(sl)] = g
            return (gx,)
        return vjp

    return _record("narrow", (x,), out, build)


def split(x: Tensor, sections: int | Sequence[int], axis: int) -> tuple[Tensor, ...]:
    """Split along an axis into equal parts (int) or given sizes (list)."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if isinstance(sections, int):
        if n % sections:
            raise ShapeError("split", x.shape, (ax, sections))
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError("split", x.shape, (ax, sizes))
    out, start = [], 0
    for s in sizes:
        out.append(narrow(x, ax, start, s))
        start += s
    return tuple(out)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def build(needs):
        return lambda g: (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record("transpose", (x,), out, build)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def build(needs):
        return lambda g: (g.reshape(x.shape),)

    return _record("reshape", (x,), out, build)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    out = x.data.mean(axis=axes if axis is not None else None, keepdims=keepdims)
    count = 1
    for a in axes:
        count *= x.shape[a]
    inv = np.float32(1.0 / count)

    def build(needs):
        def vjp(g):
            if not keepdims:
                gk = np.expand_dims(g, axes)
            else:
                gk = g
            return (np.broadcast_to(gk * inv, x.shape),)
        return vjp

    return _record("mean", (x,), np.asarray(out, dtype=np.float32), build)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def build(needs):
        def vjp(g):
            gx = gg = gb = None
            if needs[1]:
                gg = _sum_to_shape(g * xhat, gamma.shape)
            if needs[2]:
                gb = _sum_to_shape(g, beta.shape)
            if needs[0]:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                gx = inv_std * (dxhat - m1 - xhat * m2)
            return gx, gg, gb
        return vjp

    return _record("layer_norm", (x, gamma, beta), out.astype(np.float32, copy=False), build)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def build(needs):
        def vjp(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)
        return vjp

    return _record("softmax", (x,), out.astype(np.float32, copy=False), build)


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (as used by standard transformer stacks)."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def build(needs):
        def vjp(g):
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            dy = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner
            return (g * dy.astype(np.float32, copy=False),)
        return vjp

    return _record("gelu", (x,), out.astype(np.float32, copy=False), build)


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def build(needs):
        return lambda g: (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, build)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]``. Gradient scatter-adds into the table."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding", table.shape, idx.dtype)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, (int(idx.min()), int(idx.max())))
    out = table.data[idx]

    def build(needs):
        def vjp(g):
            gt = np.zeros(table.shape, dtype=np.float32)
            np.add.at(gt, idx, g)
            return (gt,)
        return vjp

    return _record("embedding", (table,), np.ascontiguousarray(out), build)


def apply_thread_limit(n: int | None = None) -> None:
    """Cap BLAS threads; DUODIFF_THREADS=1 is the strict deterministic mode."""
    if n is None:
        raw = os.environ.get("DUODIFF_THREADS")
        if not raw:
            return
        n = int(raw)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover - fallback for minimal envs
        os.environ.setdefault("OMP_NUM_THREADS", str(n))
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(n))
