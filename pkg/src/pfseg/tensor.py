"""Dense tensors with reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when
at least one operand is trainable (``requires_grad``) or was itself produced
by a recorded operation.  ``tape.backward(loss)`` then walks the records in
reverse and returns a gradient map keyed by tensor.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w * Tensor(np.arange(3.0)))
    >>> tape.backward(loss)[w]
    array([0., 1., 2.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from pfseg import kernels

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape."""


class Tensor:
    """N-dimensional float32/float64 array.

    Image-like data uses the N x C x H x W layout.  Equality is identity, so
    tensors can key the gradient map.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt ``arr`` without copying (used by ops for fresh outputs)."""
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor.wrap(np.asarray(x, dtype=dtype))


@dataclass(frozen=True)
class IndexMap:
    """Argmax offsets from a 2x2 pooling, plus the pre-pooling shape."""

    indices: np.ndarray
    input_shape: tuple


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


_active: List["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops run, so the list is already topologically
    ordered.  Trainable tensors seen as operands form the parameter registry.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.params: Dict[int, Tensor] = {}
        self._produced: Dict[int, Tensor] = {}

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        for t in inputs:
            if t.requires_grad:
                self.params.setdefault(id(t), t)
        self.nodes.append(_Node(inputs, output, backward, op))
        self._produced[id(output)] = output

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every tracked tensor it depends on.

        Gradients accumulate over every use of a tensor, which is what makes
        shared weights work.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not recorded on this tape")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not self.tracks(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {t: grads[key] for key, t in self.params.items() if key in grads}


def _record(op: str, inputs: tuple, out_arr: np.ndarray, backward) -> Tensor:
    out = Tensor.wrap(out_arr)
    if _active:
        tape = _active[-1]
        if any(tape.tracks(t) for t in inputs):
            tape.record(op, inputs, out, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# ops


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=dtype), lambda g: (np.full(shape, g, dtype=dtype),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


tanh_op = tanh
relu_op = relu
add_op = add


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along axis 1 with ``a``'s channels first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects N x C x H x W operands")
    for axis, label in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat_channels: {label} differs ({a.shape[axis]} vs {b.shape[axis]})")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: N x Cin x H x W, weight: Cout x Cin x k x k, bias: Cout or None.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be N x C x H x W, got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x k x k, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels (Cin) {cin} != weight Cin {wcin}")
    if k > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded height (H) {h + 2 * padding}")
    if k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded width (W) {w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    if x.dtype != weight.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")

    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)
    need_gx = _wants(x)

    def back(g):
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if need_gx:
            gcols = np.matmul(wmat.T, g2)
            gxp = kernels.col2im(gcols, cin, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw.reshape(weight.shape), gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, back)


def _wants(t: Tensor) -> bool:
    return bool(_active) and _active[-1].tracks(t)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2):
    """2x2/2 max pooling returning ``(values, IndexMap)``; ties go to the lowest offset."""
    if window != 2 or stride != 2:
        raise ValueError("max_pool2d supports window=2, stride=2 only")
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial extents must be even, got H={h}, W={w}")
    vals, idx = kernels.maxpool2x2(x.data)
    imap = IndexMap(idx, x.shape)
    out = _record("max_pool2d", (x,), vals, lambda g: (kernels.scatter_plane(g, idx, h, w),))
    return out, imap


def max_unpool2d(x: Tensor, indices: IndexMap) -> Tensor:
    """Scatter each value to its recorded argmax offset; other cells are zero."""
    idx = indices.indices
    if x.shape != idx.shape:
        raise ShapeError(f"max_unpool2d: input {x.shape} does not match index map {idx.shape}")
    n, c, h, w = indices.input_shape
    if (n, c) != x.shape[:2]:
        raise ShapeError(f"max_unpool2d: index map was built for N, C = {(n, c)}, got {x.shape[:2]}")
    if idx.size and (idx.min() < 0 or idx.max() >= h * w):
        raise IndexError(f"max_unpool2d: index out of range for a {h}x{w} plane")
    out = kernels.scatter_plane(x.data, idx, h, w)
    return _record("max_unpool2d", (x,), out, lambda g: (kernels.gather_plane(g, idx),))


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int = 255) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    logits: N x C x H x W; labels: integer array N x H x W.  A batch where
    every pixel is ignored yields a zero loss with zero gradient.
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: logits must be N x C x H x W, got {logits.shape}")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} do not match logits {(n, h, w)}")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: label {int(labels[bad][0])} outside [0, {c})")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    dtype = logits.dtype
    if count == 0:
        loss = np.zeros((), dtype=dtype)
    else:
        loss = np.asarray(-(picked * valid).sum() / count, dtype=dtype)

    def back(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        p *= valid[:, None]
        return ((g / count) * p,)

    return _record("softmax_cross_entropy", (logits,), loss, back)
