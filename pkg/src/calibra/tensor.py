"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations only record onto a tape while one is active (``with Tape() as tape``)
and at least one input has ``requires_grad``.  Outside a tape every op is a
plain numpy computation, which is what evaluation code relies on.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "linear",
    "relu",
    "tanh",
    "clip",
    "conv2d",
    "max_pool2d",
    "upsample_nearest2x",
    "reshape",
    "flatten",
    "take",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "backward",
    "save_tensor",
    "load_tensor",
    "encode_tensor",
    "decode_tensor",
    "TensorFormatError",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TensorFormatError(ValueError):
    """Raised when a serialized tensor is malformed."""


class Tensor:
    """A dense n-d array of 64-bit reals.

    ``data`` is always a C-contiguous float64 ndarray; ``shape`` mirrors it.
    Tensors hash by identity so they can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape

@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Gradients(dict):
    """Tensor -> gradient map; tensors the loss never reached map to zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros_like(key.data)


@dataclass
class Tape:
    """Ordered record of differentiable ops, confined to the creating thread."""

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
        """Propagate d(loss)/d(.) to every requires_grad leaf on this tape.

        Leaf ``.grad`` attributes are overwritten.  If ``loss`` was not produced
        on this tape (e.g. it is detached), every gradient is zero.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaves = self.leaves()
        if wrt is not None:
            extra = [t for t in wrt if all(t is not s for s in leaves)]
            leaves = leaves + extra
        pending: dict[int, np.ndarray] = {}
        if id(loss) in self._produced:
            pending[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not _needs_grad(inp, self._produced):
                    continue
                if id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + gi
                else:
                    pending[id(inp)] = gi
        grads = Gradients()
        for t in leaves:
            g = pending.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            grads[t] = g
        return grads


def _needs_grad(t: Tensor, produced: set[int]) -> bool:
    return t.requires_grad or id(t) in produced


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
    return tape.backward(loss, wrt)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape.record(Node(op, inputs, result, bwd))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes where lo <= x <= hi."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _emit("linear", out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    out = out + bias.data
    return _emit("linear", out, (x, weight, bias),
                 lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-row gather: ``out[b, j] = x.reshape(B, -1)[b, index[b, j]]``."""
    index = np.asarray(index, dtype=np.intp)
    flat = x.data.reshape(x.shape[0], -1)
    if index.ndim != 2 or index.shape[0] != flat.shape[0]:
        raise ShapeError(f"take: index {index.shape} does not match input {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= flat.shape[1]):
        raise ShapeError("take: index out of range")
    rows = np.arange(flat.shape[0])[:, None]
    src = x.shape

    def bwd(g):
        gx = np.zeros((src[0], flat.shape[1]))
        np.add.at(gx, (np.broadcast_to(rows, index.shape), index), g)
        return (gx.reshape(src),)

    return _emit("take", flat[rows, index], (x,), bwd)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# convolution, pooling, upsampling

def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, k, k) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    O, I, kh, kw = kernel.shape
    if I != C:
        raise ShapeError(f"conv2d: input {x.shape} has {C} channels but kernel {kernel.shape} expects {I}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kernel.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, k, stride)[:, :, :Ho, :Wo]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wmat = kernel.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    # skip gradients nobody asked for (frozen weights, constant images)
    need_x, need_w = x.requires_grad, kernel.requires_grad

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(kernel.shape) if need_w else None
        gx = None
        if need_x:
            gcols = np.tensordot(kernel.data, g, axes=([0], [1]))  # C, k, k, B, Ho, Wo
            gxp = np.zeros((C, B) + xp.shape[2:])
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)[:, :, padding:padding + H, padding:padding + W]
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", np.ascontiguousarray(out), inputs, bwd)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2d: window {size} larger than input {x.shape}")
    blocks = x.data[:, :, :Ho * size, :Wo * size].reshape(B, C, Ho, size, Wo, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gb = np.zeros((B, C, Ho, Wo, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((B, C, H, W))
        gx[:, :, :Ho * size, :Wo * size] = gb.reshape(B, C, Ho * size, Wo * size)
        return (gx,)

    return _emit("max_pool2d", out, (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _emit("upsample_nearest2x", out, (x,),
                 lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# softmax family

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit("log_softmax", out, (x,),
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``target`` is a class index per row, or a single int applied to every row.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be B x K, got {logits.shape}")
    B, K = logits.shape
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (B,))
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ValueError(f"cross_entropy: class index out of range [0, {K})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, target].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, target] -= 1.0
        return (p * (g / B),)

    return _emit("cross_entropy", np.array(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# file format: b"CALT", u32 version, u32 rank, u64 dims, f64 LE data

TENSOR_MAGIC = b"CALT"
TENSOR_VERSION = 1


def encode_tensor(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor from ``buf`` at ``offset``; returns (tensor, end offset)."""
    try:
        if buf[offset:offset + 4] != TENSOR_MAGIC:
            raise TensorFormatError("bad tensor magic")
        version, rank = struct.unpack_from("<II", buf, offset + 4)
        if version != TENSOR_VERSION:
            raise TensorFormatError(f"unsupported tensor format version {version}")
        pos = offset + 12
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        end = pos + 8 * n
        if end > len(buf):
            raise TensorFormatError("truncated tensor data")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
    except struct.error as exc:
        raise TensorFormatError(f"truncated tensor header: {exc}") from None
    return Tensor(arr.astype(np.float64)), end


def save_tensor(x, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(x))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after tensor")
    return t
