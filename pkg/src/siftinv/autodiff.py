"""Dense-tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (up to 4 dims) plus an optional gradient
accumulator.  Operators executed while a Tape is active append nodes in
execution order; backward() replays the tape in exact reverse, adding
each operation's input gradients.  Everything is single precision for
training; building float64 tensors switches the whole graph to double
precision, which is what the finite-difference checks use.

One tape per training context, single-threaded; inference with no tape
active is pure and thread-safe.
"""

from __future__ import annotations

import io
import os
import struct
import threading

import numpy as np

from .errors import FormatError, InvalidParameterError, ShapeError

__all__ = [
    "Tensor", "Tape", "no_grad", "backward", "Adam",
    "add", "sub", "mul", "neg", "relu", "leaky_relu", "sigmoid", "log", "sqrt",
    "mean", "abs_sum", "sq_sum", "concat", "affine", "linear", "conv2d", "deconv2d",
    "instance_norm", "batch_norm", "softmax_cross_entropy", "gram",
    "save_tensors", "load_tensors", "he_normal",
]


class Tensor:
    """Differentiable multi-dimensional array."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise InvalidParameterError(f"tensors support at most 4 dims, got {arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # scalar-aware arithmetic sugar used by the loss code; python scalars
    # adopt the tensor's dtype so float32 graphs stay float32
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise InvalidParameterError("tensor/tensor division is not supported")
        return mul(self, Tensor(np.asarray(1.0 / other, dtype=self.data.dtype)))

    def __neg__(self):
        return neg(self)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


# the active-tape stack is thread local: inference threads and concurrent
# training contexts never see each other's tapes
_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


class Tape:
    """Ordered record of operations; backward traverses it in exact reverse."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class no_grad:
    """Disable recording inside the block (forward passes only)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into .grad of every requires_grad tensor,
    then clear the active tape."""
    tape = _active_tape()
    if tape is None:
        raise InvalidParameterError("backward() requires an active Tape")
    if not tape.nodes:
        raise InvalidParameterError("backward() on an empty tape")
    if loss.data.size != 1:
        raise InvalidParameterError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            # gradients are never mutated in place, so aliasing g is safe
            inp.grad = gi if inp.grad is None else inp.grad + gi
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op} operands must match or be scalar",
                         a.data.shape, b.data.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.data.shape),
                                           _reduce_to(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.data.shape),
                                           _reduce_to(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_reduce_to(g * b.data, a.data.shape),
                                           _reduce_to(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, alpha * a.data))
    slope = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor(root)
    return _record(out, (a,), lambda g: (g * (0.5 / root),))


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    n = a.data.size
    return _record(out, (a,), lambda g: (np.full_like(a.data, g / n),))


def abs_sum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(np.abs(a.data).sum(), dtype=a.data.dtype))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def sq_sum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray((a.data * a.data).sum(), dtype=a.data.dtype))
    return _record(out, (a,), lambda g: (g * 2.0 * a.data,))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise InvalidParameterError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim:
            raise ShapeError("concat rank mismatch", tensors[0].data.shape, t.data.shape)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), back)


def affine(a: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """x * scale + shift with constant (non-differentiated) coefficients."""
    out = Tensor(a.data * scale + shift)
    return _record(out, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# Dense / normalization / classification primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError("linear expects (N,F) @ (F,O)", x.data.shape, w.data.shape)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def back(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ w.data.T, x.data.T @ g, gb

    return _record(out, (x, w, b) if b is not None else (x, w),
                   back if b is not None else (lambda g: back(g)[:2]))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("instance_norm expects (N,C,H,W)", x.data.shape, None)
    n, c, h, w = x.data.shape
    if h * w < 2:
        raise InvalidParameterError("instance_norm requires H*W >= 2")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out = Tensor(xhat)
    m = h * w

    def back(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gx = (g - gsum / m - xhat * (g * xhat).sum(axis=(2, 3), keepdims=True) / m) * istd
        return (gx,)

    return _record(out, (x,), back)


def batch_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("batch_norm expects (N,F)", x.data.shape, None)
    n = x.data.shape[0]
    if n < 2:
        raise InvalidParameterError("batch_norm requires batch size >= 2")
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out = Tensor(xhat)

    def back(g):
        gsum = g.sum(axis=0, keepdims=True)
        gx = (g - gsum / n - xhat * (g * xhat).sum(axis=0, keepdims=True) / n) * istd
        return (gx,)

    return _record(out, (x,), back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy between softmax(logits) and integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (N,C) logits",
                         logits.data.shape, None)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError("labels must be (N,)", labels.shape, (n,))
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidParameterError("label outside [0, C)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-30)).mean()
    out = Tensor(np.asarray(loss, dtype=logits.data.dtype))

    def back(g):
        dl = p.copy()
        dl[np.arange(n), labels] -= 1.0
        return (g * dl / n,)

    return _record(out, (logits,), back)


def gram(x: Tensor) -> Tensor:
    """Channel Gram matrices A @ A^T / (C*H*W) of a (N,C,H,W) activation."""
    if x.data.ndim != 4:
        raise ShapeError("gram expects (N,C,H,W)", x.data.shape, None)
    n, c, h, w = x.data.shape
    a = x.data.reshape(n, c, h * w)
    norm = c * h * w
    out = Tensor(np.matmul(a, a.transpose(0, 2, 1)) / norm)

    def back(g):
        da = np.matmul(g + g.transpose(0, 2, 1), a) / norm
        return (da.reshape(x.data.shape),)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N,C,H,W) -> ((N, C*kh*kw, OH*OW) patch matrix, OH, OW)."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw}/stride {stride} too large for input",
                         x.shape, (kh, kw))
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, ch: int, cw: int,
            out_h: int, out_w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add (N, C*kh*kw, ch*cw) into (N,C,out_h,out_w)."""
    n = cols.shape[0]
    g = cols.reshape(n, c, kh, kw, ch, cw)
    padded = np.zeros((n, c, out_h + 2 * pad, out_w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * ch:stride, j:j + stride * cw:stride] += g[:, :, i, j]
    if pad == 0:
        return padded
    return padded[:, :, pad:pad + out_h, pad:pad + out_w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution: x (N,Cin,H,W), w (Cout,Cin,KH,KW) -> (N,Cout,OH,OW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight", x.data.shape, w.data.shape)
    oc, ic, kh, kw = w.data.shape
    if x.data.shape[1] != ic:
        raise ShapeError("conv2d channel mismatch", x.data.shape, w.data.shape)
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(oc, ic * kh * kw)
    y = np.matmul(wmat, cols).reshape(x.data.shape[0], oc, oh, ow)
    if b is not None:
        y = y + b.data.reshape(1, oc, 1, 1)
    out = Tensor(y)

    def back(g):
        n = g.shape[0]
        gmat = np.ascontiguousarray(g.reshape(n, oc, oh * ow))
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        dcols = np.matmul(wmat.T, gmat)
        dx = _col2im(dcols, ic, kh, kw, oh, ow,
                     x.data.shape[2], x.data.shape[3], stride, pad)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    return _record(out, (x, w, b) if b is not None else (x, w), back)


def deconv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
             stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: x (N,Cin,H,W), w (Cin,Cout,KH,KW).

    Output is (N,Cout,(H-1)*stride+KH-2*pad, ...).  With a shared weight
    tensor, <conv2d(x,w), y> == <x, deconv2d(y,w)> for matched stride/pad.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("deconv2d expects 4-D input and weight", x.data.shape, w.data.shape)
    ic, oc, kh, kw = w.data.shape
    if x.data.shape[1] != ic:
        raise ShapeError("deconv2d channel mismatch", x.data.shape, w.data.shape)
    n, _, h, wdt = x.data.shape
    oh = (h - 1) * stride + kh - 2 * pad
    ow = (wdt - 1) * stride + kw - 2 * pad
    if oh < 1 or ow < 1:
        raise ShapeError("deconv2d output would be empty", x.data.shape, w.data.shape)
    wmat = w.data.reshape(ic, oc * kh * kw)
    cols = np.matmul(wmat.T, x.data.reshape(n, ic, h * wdt))
    y = _col2im(cols, oc, kh, kw, h, wdt, oh, ow, stride, pad)
    if b is not None:
        y = y + b.data.reshape(1, oc, 1, 1)
    out = Tensor(y)

    def back(g):
        gcols, gh, gw = _im2col(g, kh, kw, stride, pad)
        assert (gh, gw) == (h, wdt)
        dx = np.matmul(wmat, gcols).reshape(x.data.shape)
        xmat = np.ascontiguousarray(x.data.reshape(n, ic, h * wdt))
        dw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    return _record(out, (x, w, b) if b is not None else (x, w), back)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; step() zeroes the gradients it consumed."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = m / b1c
            update /= np.sqrt(v / b2c) + self.eps
            update *= self.lr
            p.data = p.data - update
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean normal with std sqrt(2/fan_in), float32."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# CKP1 checkpoint format
# ---------------------------------------------------------------------------

_CKP_MAGIC = b"CKP1"


def save_tensors(path: str | os.PathLike, named: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(_CKP_MAGIC)
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKP_MAGIC:
        raise FormatError(f"bad CKP1 magic in {os.fspath(path)}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated CKP1 file {os.fspath(path)}")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(size * 4), dtype="<f4").reshape(dims).copy()
        named[name] = arr
    if pos != len(blob):
        raise FormatError(f"trailing bytes in CKP1 file {os.fspath(path)}")
    return named
