"""Small float64 tensor engine with tape-based reverse-mode autodiff.

Only the operations needed by the CBAM-CNN are provided.  Every op
records a node on the thread's tape whenever one of its inputs requires a
gradient; :func:`backward` replays the tape in reverse and then clears it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch

BCE_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations (already topological)."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # grads are never mutated in place, so sharing the buffer is safe
        t.grad = np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss`` on the tape.

    Gradients add onto whatever is already stored, so two successive
    backward passes sum their contributions.  The tape is emptied afterwards.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    try:
        if not loss.requires_grad:
            return
        _accumulate(loss, np.ones_like(loss.data))
        for node in reversed(tape.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            grads = node.backward_fn(gout)
            for inp, g in zip(node.inputs, grads):
                if g is not None and inp.requires_grad:
                    _accumulate(inp, g)
    finally:
        tape.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _expect_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise ShapeMismatch(f"{what}: expected {ndim}-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------- convolution


def conv1d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C_in,W]`` with ``k[C_out,C_in,K]`` via im2col."""
    _expect_ndim(x, 3, "conv1d input")
    _expect_ndim(k, 3, "conv1d kernel")
    n, c_in, w = x.shape
    c_out, kc_in, ksize = k.shape
    if kc_in != c_in:
        raise ShapeMismatch(f"conv1d: input has {c_in} channels, kernel expects {kc_in}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("conv1d: stride must be >= 1 and padding >= 0")
    if ksize > w + 2 * padding:
        raise ShapeMismatch(f"conv1d: kernel {ksize} wider than padded input {w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    w_out = (w + 2 * padding - ksize) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, ksize, axis=2)[:, :, ::stride][:, :, :w_out]
    cols = win.transpose(0, 2, 1, 3).reshape(n * w_out, c_in * ksize)
    kmat = k.data.reshape(c_out, c_in * ksize)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, w_out, c_out).transpose(0, 2, 1)

    inputs = (x, k) if bias is None else (x, k, bias)

    def _backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * w_out, c_out)
        gk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _conv1d_input_grad(g, g2, k.data, kmat, xp.shape, w, stride, padding)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2))

    return _result(out, inputs, _backward)


def _conv1d_input_grad(g, g2, kdata, kmat, xp_shape, w, stride, padding):
    n, c_out, w_out = g.shape
    c_in, ksize = kdata.shape[1], kdata.shape[2]
    if stride == 1 and ksize - 1 - padding >= 0:
        # transposed convolution: correlate the zero-padded output gradient
        # with the flipped kernel, channel-last so the im2col copy is cheap
        edge = ksize - 1
        gl = np.pad(g.transpose(0, 2, 1), ((0, 0), (edge, edge), (0, 0)))
        win = sliding_window_view(gl, ksize, axis=1)[:, padding:padding + w]
        kflip = kdata[:, :, ::-1].transpose(0, 2, 1).reshape(c_out * ksize, c_in)
        gx = win.reshape(n * w, c_out * ksize) @ kflip
        return gx.reshape(n, w, c_in).transpose(0, 2, 1)
    dcols = (g2 @ kmat).reshape(n, w_out, c_in, ksize)
    gxp = np.zeros(xp_shape)
    span = stride * (w_out - 1) + 1
    for j in range(ksize):
        gxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return gxp[:, :, padding:padding + w] if padding else gxp


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    _expect_ndim(x, 2, "dense input")
    _expect_ndim(w, 2, "dense weight")
    if w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"dense: input features {x.shape[1]} != weight fan-in {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"dense: bias shape {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def _backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, inputs, _backward)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def mul_broadcast(x: Tensor, a: Tensor) -> Tensor:
    """Apply an attention map to ``x[N,C,W]``.

    ``a`` is either ``[N,C]`` (per-channel, broadcast along W) or
    ``[N,1,W]`` (per-position, broadcast along C).  Any other shape,
    including an exact ``[N,C,W]`` match, is rejected.
    """
    _expect_ndim(x, 3, "mul_broadcast input")
    n, c, w = x.shape
    if a.shape == (n, c):
        ab = a.data[:, :, None]
        reduce_axis = 2
    elif a.shape == (n, 1, w):
        ab = a.data
        reduce_axis = 1
    else:
        raise ShapeMismatch(f"mul_broadcast: attention {a.shape} fits neither ({n},{c}) nor ({n},1,{w})")

    def _backward(g):
        gx = g * ab if x.requires_grad else None
        ga = None
        if a.requires_grad:
            ga = (g * x.data).sum(axis=reduce_axis)
            if reduce_axis == 1:
                ga = ga[:, None, :]
        return gx, ga

    return _result(x.data * ab, (x, a), _backward)


# ---------------------------------------------------------------- shape ops


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    for t in xs:
        _expect_ndim(t, 3, "concat_channels input")
        if t.shape[0] != xs[0].shape[0] or t.shape[2] != xs[0].shape[2]:
            raise ShapeMismatch(f"concat_channels: {t.shape} incompatible with {xs[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(out, xs, _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, np.asarray(g).item()),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, np.asarray(g).item() / size),))


# ---------------------------------------------------------------- pooling


def _windows(x: Tensor, window: int, stride: int, what: str):
    _expect_ndim(x, 3, what)
    if window < 1 or stride < 1:
        raise ShapeMismatch(f"{what}: window and stride must be >= 1")
    if window > x.shape[2]:
        raise ShapeMismatch(f"{what}: window {window} wider than input {x.shape[2]}")
    w_out = (x.shape[2] - window) // stride + 1
    return sliding_window_view(x.data, window, axis=2)[:, :, ::stride][:, :, :w_out], w_out


def maxpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    win, w_out = _windows(x, window, stride, "maxpool1d")
    if window == 2 and stride == 2:
        return _maxpool_pairs(x, w_out)
    arg = win.argmax(axis=-1)  # first index wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    span = stride * (w_out - 1) + 1

    def _backward(g):
        gx = np.zeros(x.shape)
        for j in range(window):
            gx[:, :, j:j + span:stride] += g * (arg == j)
        return (gx,)

    return _result(out, (x,), _backward)


def _maxpool_pairs(x: Tensor, w_out: int) -> Tensor:
    left = x.data[:, :, 0:2 * w_out:2]
    right = x.data[:, :, 1:2 * w_out:2]
    take_right = right > left  # ties go to the left (lower) index
    out = np.where(take_right, right, left)

    def _backward(g):
        gx = np.zeros(x.shape)
        gx[:, :, 0:2 * w_out:2] = np.where(take_right, 0.0, g)
        gx[:, :, 1:2 * w_out:2] = np.where(take_right, g, 0.0)
        return (gx,)

    return _result(out, (x,), _backward)


def avgpool1d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    win, w_out = _windows(x, window, stride, "avgpool1d")
    out = win.mean(axis=-1)
    span = stride * (w_out - 1) + 1

    def _backward(g):
        gx = np.zeros(x.shape)
        share = g / window
        for j in range(window):
            gx[:, :, j:j + span:stride] += share
        return (gx,)

    return _result(out, (x,), _backward)


def global_avgpool_w(x: Tensor) -> Tensor:
    """Mean over the width axis: ``[N,C,W] -> [N,C]``."""
    _expect_ndim(x, 3, "global_avgpool_w")
    w = x.shape[2]
    return _result(x.data.mean(axis=2), (x,), lambda g: (np.repeat(g[:, :, None] / w, w, axis=2),))


def _argmax_reduce(x: Tensor, axis: int, keepdims: bool) -> Tensor:
    out = x.data.max(axis=axis, keepdims=keepdims)

    def _backward(g):
        arg = np.expand_dims(x.data.argmax(axis=axis), axis)
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), _backward)


def global_maxpool_w(x: Tensor) -> Tensor:
    """Max over the width axis: ``[N,C,W] -> [N,C]``; ties go to the lowest index."""
    _expect_ndim(x, 3, "global_maxpool_w")
    return _argmax_reduce(x, axis=2, keepdims=False)


def channel_avg(x: Tensor) -> Tensor:
    """Mean across channels: ``[N,C,W] -> [N,1,W]``."""
    _expect_ndim(x, 3, "channel_avg")
    c = x.shape[1]
    return _result(x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g / c, c, axis=1),))


def channel_max(x: Tensor) -> Tensor:
    _expect_ndim(x, 3, "channel_max")
    return _argmax_reduce(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- loss


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p[N]`` against 0/1 labels.

    ``p`` is clamped to ``[1e-12, 1 - 1e-12]`` before the logs; the gradient
    is evaluated at the clamped value and passed straight through.
    """
    y = np.asarray(y, dtype=np.float64)
    _expect_ndim(p, 1, "bce_loss probabilities")
    if y.shape != p.shape:
        raise ShapeMismatch(f"bce_loss: labels {y.shape} vs probabilities {p.shape}")
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.shape[0]
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()

    def _backward(g):
        return (np.asarray(g).item() * (pc - y) / (pc * (1.0 - pc)) / n,)

    return _result(np.asarray(loss), (p,), _backward)
