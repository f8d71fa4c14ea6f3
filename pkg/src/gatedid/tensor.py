"""Dense tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input tracks
gradients, records the parents plus a closure mapping the output gradient
to per-parent gradients. ``Tensor.backward`` walks that graph in reverse
topological order.

Shapes never broadcast implicitly. The one sanctioned broadcast is
``expand``, which inserts a new axis of a given length; everything else
raises ``ShapeError`` on mismatch. A graph is single precision or double
precision throughout; mixing raises ``DTypeError``.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterable, Iterator, Mapping, Sequence
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "ShapeError",
    "DTypeError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "where",
    "matmul",
    "linear",
    "transpose",
    "reshape",
    "concat",
    "take",
    "expand",
    "broadcast_expand",
    "reduce_sum",
    "reduce_mean",
    "softmax_rows",
    "minmax_rows",
    "gelu",
    "tanh",
    "layer_norm",
    "embedding",
    "mse",
    "mlp",
    "backward",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build outputs without recording the tape (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        *,
        _parents: tuple = (),
        _backward: Optional[Callable] = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; shape rules are those of the named ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad=grad)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _check_dtypes(op: str, *ts: Tensor) -> np.dtype:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"{op}: mixed precision {dt} vs {t.dtype}")
    return dt


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _check_dtypes("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    _check_dtypes("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    _check_dtypes("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    _check_dtypes("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # non-finite results raise below
        out = ad / bd
    return _make("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make("add_scalar", a.data + c, (a,), lambda g: (g,))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b`` (cond is a constant)."""
    _same_shape("where", a, b)
    _check_dtypes("where", a, b)
    cond = np.asarray(cond, dtype=bool)
    if cond.shape != a.shape:
        raise ShapeError(f"where: condition {cond.shape} vs operands {a.shape}")
    zero = np.zeros((), dtype=a.dtype)
    return _make("where", np.where(cond, a.data, b.data), (a, b), lambda g: (np.where(cond, g, zero), np.where(cond, zero, g)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make("gelu", out, (a,), bw)


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, p) @ (..., p, n) with identical leading dims."""
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (..., p) @ W (p, n) + b (n,), applied to every leading position."""
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes("linear", *parents)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: {x.shape} with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        gx = g @ wd.T
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("linear", out, parents, bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: rank {a.ndim}")
    return _make("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ShapeError("concat: empty input")
    _check_dtypes("concat", *ts)
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ts[0].shape[:ax] + ts[0].shape[ax + 1 :]:
            raise ShapeError(f"concat: incompatible {ts[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def take(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"take: [{start}, {stop}) outside axis of length {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src_shape = a.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make("take", a.data[idx], (a,), bw)


def expand(a: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis of length ``size`` and repeat along it."""
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), size, axis=ax)
    return _make("expand", out, (a,), lambda g: (g.sum(axis=ax),))


def broadcast_expand(w: Tensor, width: int) -> Tensor:
    """Repeat a per-row weight vector along a new trailing feature axis."""
    return expand(w, -1, width)


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    src = a.shape
    if axis is None:
        return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.repeat(np.expand_dims(g, ax), src[ax], axis=ax),)

    return _make("sum", a.data.sum(axis=ax), (a,), bw)


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis % a.ndim]
    return scale(reduce_sum(a, axis), 1.0 / n)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (boolean, same shape) marks allowed entries; every row must
    allow at least one entry.
    """
    d = x.data
    if mask is not None:
        if mask.shape != d.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs logits {d.shape}")
        if not np.all(mask.any(axis=-1)):
            raise ShapeError("softmax: a row has no allowed entries")
        d = np.where(mask, d, -np.inf)
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


def minmax_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rescale each row of the last axis to [0, 1] by its min and max.

    Rows whose range is below ``eps`` map to all zeros and pass no gradient.
    Gradients flow to the first argmin / argmax entries.
    """
    d = x.data
    lo = d.min(axis=-1, keepdims=True)
    hi = d.max(axis=-1, keepdims=True)
    rng = hi - lo
    degenerate = rng < eps
    safe = np.where(degenerate, 1.0, rng).astype(d.dtype)
    out = np.where(degenerate, 0.0, (d - lo) / safe).astype(d.dtype)
    n = d.shape[-1]
    imin = d.argmin(axis=-1)
    imax = d.argmax(axis=-1)

    def bw(g):
        g = np.where(degenerate, 0.0, g).astype(d.dtype)
        gx = g / safe
        # d out_i / d lo = (out_i - 1) / r ; d out_i / d hi = -out_i / r
        glo = ((g * (out - 1.0)) / safe).sum(axis=-1)
        ghi = (-(g * out) / safe).sum(axis=-1)
        gx = gx + np.eye(n, dtype=d.dtype)[imin] * glo[..., None]
        gx = gx + np.eye(n, dtype=d.dtype)[imax] * ghi[..., None]
        return (gx,)

    return _make("minmax", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_dtypes("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} for width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding", table.data[idx], (table,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all entries."""
    diff = sub(a, b)
    return reduce_mean(mul(diff, diff))


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two affine layers with a GELU between them."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# --------------------------------------------------------------------------
# reverse pass


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(
    loss: Tensor, params: Optional["ParamSet"] = None, grad: Optional[np.ndarray] = None
) -> Optional[dict[str, Optional[np.ndarray]]]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls add to existing buffers; clear them with ``zero_grad``.
    When ``params`` is given, returns their gradient buffers by name.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        _run_backward(loss, grad)
    if params is not None:
        return {k: v.grad for k, v in params.items()}
    return None


def _run_backward(loss: Tensor, grad: Optional[np.ndarray]) -> None:
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    }
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class ParamSet(Mapping):
    """Name -> trainable Tensor, iterated in sorted-name order."""

    def __init__(self, items: Optional[Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]] = None):
        self._d: dict[str, Tensor] = {}
        if items is not None:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        return self._d[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        if not isinstance(t, Tensor):
            raise TypeError(f"{name}: expected Tensor")
        self._d[name] = t

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._d))

    def __len__(self) -> int:
        return len(self._d)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._d:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._d[name] = t
        return t

    def subset(self, prefixes: Sequence[str]) -> "ParamSet":
        return ParamSet({k: v for k, v in self.items() if any(k.startswith(p) for p in prefixes)})

    def zero_grad(self) -> None:
        for t in self._d.values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for t in self._d.values():
            t.requires_grad = flag

    def num_elements(self) -> int:
        return sum(t.size for t in self._d.values())
