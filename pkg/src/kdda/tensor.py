"""Minimal reverse-mode automatic differentiation over float64 arrays.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates into the ``grad`` buffers of trainable
leaves. Gradients accumulate across calls until the caller zeroes them.

Broadcasting is deliberately limited to tensor-with-scalar; anything else is
a :class:`ShapeError`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "as_tensor",
    "graph_order",
    "op_forward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "conv2d",
    "relu",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "log",
    "exp",
    "max_along_axis",
    "clip_min",
    "softmax",
    "concat",
    "max_pool2d",
    "avg_pool2d",
    "upsample2d",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    """Backward was requested on something that cannot be differentiated."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from its inputs."""


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return arr


class Tensor:
    """A dense float64 array that can take part in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _finite(data, op)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.op = op
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "leaf"
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached: no trainable leaf reaches it")
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(graph_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` (trainable paths only), inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape, detail="only scalar broadcasting is supported")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._result(out, (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Clamp from below; the gradient is zero where the clamp is active."""
    mask = a.data >= lo
    out = np.where(mask, a.data, lo)
    return Tensor._result(out, (a,), lambda g: (g * mask,), "clip_min")


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dimensions")
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(out, (a,), backward, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    src = a.shape
    count = int(np.prod([src[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._result(out, (a,), backward, "reduce_mean")


def max_along_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    src = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(src)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return Tensor._result(out if keepdims else out.squeeze(axis), (a,), backward, "max_along_axis")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError("concat", ref, t.shape, detail=f"must agree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias must match output features")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "linear")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding keeping H, W.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``w`` is (C_out, C_in, k, k)
    with odd ``k``; ``b`` is an optional (C_out,) bias.

    The padded batch is flattened to (C_in, B*Hp*Wp), where every kernel tap
    is a constant offset. Stacking the k*k shifted slices gives an im2col
    matrix without strided gathers, and each pass is then a single GEMM.
    """
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape, detail="want (C,H,W) or (B,C,H,W) and (O,C,k,k)")
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = w.shape
    if Cw != C or kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="channel mismatch or even/non-square kernel")
    if b is not None and b.shape != (O,):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must have C_out entries")
    k = kh
    p = k // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    L = B * Hp * Wp
    shifts = [dy * Wp + dx for dy in range(k) for dx in range(k)]
    # every valid output position q satisfies q + max(shift) < L
    Lq = L - shifts[-1]

    xp = np.zeros((C, B, Hp, Wp))
    xp[:, :, p:p + H, p:p + W] = xd.transpose(1, 0, 2, 3)
    X = xp.reshape(C, L)
    cols = np.empty((k * k, C, Lq))
    for t, s in enumerate(shifts):
        cols[t] = X[:, s:s + Lq]
    cols = cols.reshape(k * k * C, Lq)
    wd = w.data
    acc = np.zeros((O, L))
    acc[:, :Lq] = wd.transpose(0, 2, 3, 1).reshape(O, k * k * C) @ cols
    out = acc.reshape(O, B, Hp, Wp)[:, :, :H, :W].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out[0] if unbatched else out)

    def backward(g):
        g4 = g[None] if unbatched else g
        G = np.zeros((O, B, Hp, Wp))
        G[:, :, :H, :W] = g4.transpose(1, 0, 2, 3)
        Gq = G.reshape(O, L)[:, :Lq]
        gw = (Gq @ cols.T).reshape(O, k, k, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            stacked = np.zeros((k * k, O, L))
            for t, s in enumerate(shifts):
                stacked[t, :, s:s + Lq] = Gq
            gxp = wd.transpose(1, 2, 3, 0).reshape(C, k * k * O) @ stacked.reshape(k * k * O, L)
            gx = gxp.reshape(C, B, Hp, Wp)[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3)
            gx = gx[0] if unbatched else np.ascontiguousarray(gx)
        grads = (gx, gw)
        if b is not None:
            grads += (g4.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# spatial resampling on (B, C, H, W)
# ---------------------------------------------------------------------------

def _check_even(op: str, a: Tensor) -> tuple[int, int, int, int]:
    if a.ndim != 4 or a.shape[2] % 2 or a.shape[3] % 2:
        raise ShapeError(op, a.shape, detail="want (B,C,H,W) with even H and W")
    return a.shape


def max_pool2d(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in a window."""
    B, C, H, W = _check_even("max_pool2d", a)
    blocks = a.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return Tensor._result(out, (a,), backward, "max_pool2d")


def avg_pool2d(a: Tensor) -> Tensor:
    B, C, H, W = _check_even("avg_pool2d", a)
    out = a.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._result(out, (a,), backward, "avg_pool2d")


def upsample2d(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    if a.ndim != 4:
        raise ShapeError("upsample2d", a.shape, detail="want (B,C,H,W)")
    B, C, H, W = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, (a,), backward, "upsample2d")


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "reshape": reshape,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "log": log,
    "exp": exp,
    "max_along_axis": max_along_axis,
    "sub": sub,
    "neg": neg,
    "linear": linear,
    "transpose": transpose,
    "clip_min": clip_min,
    "softmax": softmax,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "upsample2d": upsample2d,
}


def op_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``op_forward("conv2d", x, w)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps ``x`` to a scalar tensor. ``x`` must be a leaf with
    ``requires_grad``; its data is perturbed in place and restored. Pass
    ``coords`` (flat indices) to check a subset. Returns ``inf`` if ``f``
    produces a non-finite value anywhere along the way.
    """
    if not x.requires_grad:
        raise GraphError("grad_check needs x with requires_grad=True")
    saved_grad = x.grad.copy()
    x.zero_grad()
    try:
        out = f(x)
        out.backward()
    except (NonFiniteError, FloatingPointError):
        x.grad[...] = saved_grad
        return float("inf")
    analytic = x.grad.reshape(-1).copy()
    x.grad[...] = saved_grad

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        try:
            flat[i] = orig + step
            up = f(x).item()
            flat[i] = orig - step
            down = f(x).item()
        except (NonFiniteError, FloatingPointError):
            return float("inf")
        finally:
            flat[i] = orig
        numeric = (up - down) / (2.0 * step)
        if not np.isfinite(numeric):
            return float("inf")
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
