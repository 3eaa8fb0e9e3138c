"""Dense float64 tensors with taped reverse-mode differentiation.

Arrays are row-major with the channel axis last (``[H, W, C]``, optionally
with a leading batch axis ``[N, H, W, C]``). Every operation that involves a
tensor with ``requires_grad`` records a closure on the output; calling
:meth:`Tensor.backward` on a scalar walks the tape in reverse topological
order and accumulates ``grad`` on every reachable tensor.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "elementwise",
    "reduce",
    "conv2d",
    "concat",
    "channel_matmul",
    "slogdet",
    "matrix_inverse",
    "ParamSet",
    "adam_step",
    "save_tsr",
    "load_tsr",
    "tsr_bytes",
    "tsr_from_bytes",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array that can take part in a differentiable computation.

    Parameters
    ----------
    data : array_like
        Values; always copied into a float64 ndarray.
    requires_grad : bool
        Leaf tensors with this flag receive gradients on backward.
    name : str, optional
        Label used in diagnostics.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self):
        return elementwise("neg", self)

    def __getitem__(self, index) -> "Tensor":
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g) if _needs_add_at(index) else _assign_add(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def relu(self):
        return elementwise("relu", self)

    def tanh(self):
        return elementwise("tanh", self)

    def abs(self):
        return elementwise("abs", self)

    def square(self):
        return elementwise("square", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def max(self, axes=None):
        return reduce("max", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_add_at(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


_UNARY = {"exp", "log", "relu", "tanh", "neg", "abs", "square", "sqrt"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a pointwise operation.

    Unary tags: ``exp, log, relu, tanh, neg, abs, square, sqrt``. Binary
    tags: ``add, sub, mul, div``; operands follow numpy broadcasting and
    anything else raises :class:`ShapeError`. Python scalars are accepted
    for either binary operand.
    """
    a = _as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _unary(op, a)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} takes two operands")
    b = _as_tensor(b)
    x, y = a.data, b.data
    _broadcast_shape(x, y)
    sa, sb = x.shape, y.shape
    if op == "add":
        out = x + y
        back = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif op == "sub":
        out = x - y
        back = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif op == "mul":
        out = x * y
        back = lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb))
    else:
        out = x / y
        back = lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb))
    return Tensor._make(out, (a, b), back)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "exp":
        out = np.exp(x)
        back = lambda g: (g * out,)
    elif op == "log":
        out = np.log(x)
        back = lambda g: (g / x,)
    elif op == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)
        back = lambda g: (g * mask,)
    elif op == "tanh":
        out = np.tanh(x)
        back = lambda g: (g * (1.0 - out * out),)
    elif op == "neg":
        out = -x
        back = lambda g: (-g,)
    elif op == "abs":
        out = np.abs(x)
        back = lambda g: (g * np.sign(x),)
    elif op == "square":
        out = x * x
        back = lambda g: (2.0 * g * x,)
    else:
        out = np.sqrt(x)
        back = lambda g: (0.5 * g / out,)
    return Tensor._make(out, (a,), back)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(sorted(set(norm)))


def reduce(op: str, a, axes=None) -> Tensor:
    """Reduce over ``axes`` (all axes when ``None``) with ``sum``, ``mean`` or ``max``.

    The reduced axes are dropped. For ``max`` the gradient goes to the
    first maximal element in row-major order of the reduced block.
    """
    a = _as_tensor(a)
    x = a.data
    axes = _normalize_axes(axes, x.ndim)
    for ax in axes:
        if x.shape[ax] == 0:
            raise ShapeError(f"cannot reduce over empty axis {ax} of shape {x.shape}")
    shape = x.shape
    if op == "sum" or op == "mean":
        count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
        out = x.sum(axis=axes)
        if op == "mean":
            out = out / count
        keep = tuple(1 if i in axes else n for i, n in enumerate(shape))
        scale = 1.0 if op == "sum" else 1.0 / count

        def back(g):
            return (np.broadcast_to(g.reshape(keep) * scale, shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=np.float64), (a,), back)
    if op != "max":
        raise ValueError(f"unknown reduction {op!r}")
    kept = [i for i in range(x.ndim) if i not in axes]
    perm = kept + list(axes)
    moved = x.transpose(perm)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    arg = np.argmax(flat, axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def back(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[..., None], np.asarray(g)[..., None], axis=-1)
        return (onehot.reshape(moved.shape).transpose(inv),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), back)


def conv2d(x, kernel, bias) -> Tensor:
    """Stride-1, zero 'same'-padded 2-D cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``[H, W, Cin]`` or ``[N, H, W, Cin]``.
    kernel : Tensor
        ``[kh, kw, Cin, Cout]`` with ``kh, kw`` in ``{1, 3}``.
    bias : Tensor
        ``[Cout]``.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    xd, kd, bd = x.data, kernel.data, bias.data
    if kd.ndim != 4 or kd.shape[0] not in (1, 3) or kd.shape[1] not in (1, 3):
        raise ShapeError(f"kernel shape {kd.shape} must be [kh,kw,Cin,Cout] with kh,kw in {{1,3}}")
    if xd.ndim not in (3, 4) or xd.shape[-1] != kd.shape[2]:
        raise ShapeError(f"input shape {xd.shape} does not match kernel shape {kd.shape}")
    if bd.shape != (kd.shape[3],):
        raise ShapeError(f"bias shape {bd.shape} does not match kernel shape {kd.shape}")
    unbatched = xd.ndim == 3
    xb = xd[None] if unbatched else xd
    kh, kw, cin, cout = kd.shape
    ph, pw = kh // 2, kw // 2
    n, h, w, _ = xb.shape
    if kh == 1 and kw == 1:
        k2 = kd[0, 0]
        out = xb.reshape(-1, cin) @ k2 + bd
        out = out.reshape(n, h, w, cout)

        def back(g):
            gb = g[None] if unbatched else g
            g2 = gb.reshape(-1, cout)
            gx = (g2 @ k2.T).reshape(xb.shape)
            gk = (xb.reshape(-1, cin).T @ g2)[None, None]
            return (gx[0] if unbatched else gx, gk, g2.sum(axis=0))

    else:
        padded = np.pad(xb, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        # windows: [n, h, w, cin, kh, kw]
        cols = sliding_window_view(padded, (kh, kw), axis=(1, 2))
        cols2 = np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, kh * kw * cin)
        k2 = kd.reshape(kh * kw * cin, cout)
        out = (cols2 @ k2 + bd).reshape(n, h, w, cout)

        def back(g):
            gb = g[None] if unbatched else g
            g2 = gb.reshape(-1, cout)
            gk = (cols2.T @ g2).reshape(kh, kw, cin, cout)
            gcols = (g2 @ k2.T).reshape(n, h, w, kh, kw, cin)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + h, j : j + w, :] += gcols[:, :, :, i, j, :]
            gx = gpad[:, ph : ph + h, pw : pw + w, :]
            return (gx[0] if unbatched else gx, gk, g2.sum(axis=0))

    if unbatched:
        out = out[0]
    return Tensor._make(out, (x, kernel, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; other extents must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[a.shape for a in arrays]} on axis {axis}") from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, back)


def channel_matmul(x, weight) -> Tensor:
    """Multiply each channel vector by ``weight``: ``out[..., i] = sum_j W[i, j] x[..., j]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or wd.shape[1] != xd.shape[-1]:
        raise ShapeError(f"weight shape {wd.shape} does not match input shape {xd.shape}")
    out = xd @ wd.T

    def back(g):
        gx = g @ wd
        gw = g.reshape(-1, wd.shape[0]).T @ xd.reshape(-1, wd.shape[1])
        return gx, gw

    return Tensor._make(out, (x, weight), back)


def slogdet(weight) -> Tensor:
    """log|det(W)| as a scalar tensor (LU based)."""
    weight = _as_tensor(weight)
    sign, logabs = np.linalg.slogdet(weight.data)
    if sign == 0:
        raise np.linalg.LinAlgError("singular matrix")

    def back(g):
        return (g * np.linalg.inv(weight.data).T,)

    return Tensor._make(np.asarray(logabs, dtype=np.float64), (weight,), back)


def matrix_inverse(weight) -> Tensor:
    weight = _as_tensor(weight)
    inv = np.linalg.inv(weight.data)

    def back(g):
        return (-inv.T @ g @ inv.T,)

    return Tensor._make(inv, (weight,), back)


# -- optimisation ------------------------------------------------------------


class ParamSet:
    """Named trainable tensors plus Adam moment estimates.

    Parameters
    ----------
    params : mapping of name to Tensor
        Insertion order is kept and defines iteration order.
    """

    def __init__(self, params: dict[str, Tensor] | Iterable[tuple[str, Tensor]]):
        self.params: dict[str, Tensor] = dict(params)
        self.m: dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v: dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step = 0

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def clear_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_elements(self) -> int:
        return sum(p.size for p in self.params.values())

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(p.data)) for k, p in self.params.items()}


def adam_step(
    params: ParamSet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    for name, p in params.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.params.items():
        g = p.grad
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
    return params


# -- TSR1 serialisation --------------------------------------------------------

_TSR_MAGIC = b"TSR1"


def tsr_bytes(array) -> bytes:
    """Encode an array as TSR1: magic, u32 rank, u64 extents, LE float64 payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    head = _TSR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def tsr_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TSR1 blob starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != _TSR_MAGIC:
        raise ValueError("bad TSR1 magic")
    if len(buf) < offset + 8:
        raise ValueError("truncated TSR1 header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 8 * rank:
        raise ValueError("truncated TSR1 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise ValueError(f"truncated TSR1 payload: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, end


def save_tsr(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(tsr_bytes(array))


def load_tsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tsr_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after TSR1 payload")
    return arr
