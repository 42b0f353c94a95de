"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by the segmentation model and the
adaptation losses are provided. Every op records a closure that maps the
upstream gradient to one gradient per parent; :func:`backward` replays them
in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import struct
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

CHECKPOINT_MAGIC = b"DBDA"
CHECKPOINT_VERSION = 1

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


class GraphNode:
    """Back-edge of a non-leaf tensor: op name, parents and the vector-Jacobian product."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple[Tensor, ...], vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A float64 array that optionally participates in a differentiation graph.

    Leaves created with ``requires_grad=True`` collect ``d(loss)/d(leaf)`` in
    :attr:`grad` after :func:`backward`. Tensors are never mutated in place
    once they are part of a graph.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: GraphNode | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would turn 0-d scalars into shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _node=GraphNode(op, parents, vjp))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_same_or_scalar(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("add", a, b)
    return _make(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("sub", a, b)
    return _make(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("mul", a, b)
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("div", a, b)
    out = a.data / b.data
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient passes only where ``a > floor``."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), "clamp_min", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / views


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), vjp)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(
        np.asarray(a.data.mean()),
        "mean",
        (a,),
        lambda g: (np.full(a.shape, np.asarray(g).item() / n),),
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def select(a, mask: np.ndarray) -> Tensor:
    """Entries of ``a`` where the boolean ``mask`` is set, flattened."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"select: mask shape {mask.shape} does not match tensor shape {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[mask] = g
        return (full,)

    return _make(a.data[mask], "select", (a,), vjp)


def gather_channel(a, index: np.ndarray) -> Tensor:
    """Pick ``a[b, index[b,h,w], h, w]`` from a B×C×H×W tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 4 or index.shape != (a.shape[0],) + a.shape[2:]:
        raise ShapeError(f"gather_channel: tensor shape {a.shape} vs index shape {index.shape}")
    idx = index[:, None]
    out = np.take_along_axis(a.data, idx, axis=1)[:, 0]

    def vjp(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g[:, None], axis=1)
        return (full,)

    return _make(out, "gather_channel", (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


# ---------------------------------------------------------------- image ops


def _windows(xp: np.ndarray, k: int, dilation: int, h: int, w: int) -> np.ndarray:
    """View of shape (B, Cin, k, k, H, W) over a padded input."""
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], k, k, h, w),
        strides=(sb, sc, sh * dilation, sw * dilation, sh, sw),
        writeable=False,
    )


def conv2d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Zero-padded "same" 2-D convolution (cross-correlation).

    ``x`` is B×Cin×H×W, ``weight`` Cout×Cin×k×k with odd k, ``bias`` a
    length-Cout vector or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if x.shape[1] != cin or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} does not conform to kernel {weight.shape}")
    if dilation < 1:
        raise ValueError(f"conv2d: dilation must be >= 1, got {dilation}")
    bsz, _, h, w = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _windows(xp, k, dilation, h, w)
    out = np.einsum("bcijhw,ocij->bohw", cols, weight.data, optimize=True)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
        out = out + bias.data[None, :, None, None]
        parents = parents + (bias,)

    def vjp(g):
        grads = []
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * dilation : i * dilation + h, j * dilation : j * dilation + w] += (
                        np.einsum("bohw,oc->bchw", g, weight.data[:, :, i, j], optimize=True)
                    )
            grads.append(gxp[:, :, pad : pad + h, pad : pad + w])
        else:
            grads.append(None)
        grads.append(np.einsum("bohw,bcijhw->ocij", g, cols, optimize=True))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, "conv2d", parents, vjp)


def avg_pool2(x) -> Tensor:
    """2×2 average pooling with stride 2."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size {h}x{w} is not divisible by 2")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _make(out, "avg_pool2", (x,), vjp)


def upsample2(x) -> Tensor:
    """2× nearest-neighbour upsampling."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2", (x,), vjp)


def softmax_channel(x) -> Tensor:
    """Softmax over axis 1 of a B×C×H×W tensor, stabilised by max subtraction."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"softmax_channel: expected B×C×H×W input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax_channel", (x,), vjp)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; clear them between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.parents, t.node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    """Write parameters in the little-endian ``DBDA`` binary format.

    Layout: magic, u32 version, u32 header length + UTF-8 ``key=value`` lines,
    u32 parameter count, then per parameter u32 name length + UTF-8 name,
    u32 rank, u64 dims, raw f64 values.
    """
    head = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a DBDA checkpoint (bad magic {buf[:4]!r})")
    version, head_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = {}
    for line in buf[pos : pos + head_len].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    pos += head_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(DTYPE)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes after last parameter")
    return header, params


def parameters_checksum(params: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
