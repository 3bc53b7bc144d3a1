"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a :class:`Tape`
is active and at least one input is tracked, records a closure that maps the
output gradient to input gradients.  Nothing is recorded outside a tape, so
inference runs at plain numpy speed.

Sequences are laid out channel-major, ``(B, C, T)`` or ``(C, T)``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised for misuse of a gradient tape."""


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-D real array, optionally tracked for gradients.

    ``requires_grad`` marks a leaf (typically a parameter) whose gradient a tape
    should report.  Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
    return Tensor(arr.astype(dtype, copy=False))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records primitive applications for one backward pass.

    Use as a context manager.  A tape is single-owner: it must not be shared
    across threads, and :meth:`backward` may run only once until
    :meth:`reset` is called.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            raise TapeError("tapes must be exited in LIFO order")

    def reset(self) -> None:
        self.nodes.clear()
        self._tracked.clear()
        self._used = False

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._tracked[id(out)] = out

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None,
                 include_leaves: bool = True) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) back through recorded nodes.

        Returns a mapping from tensor to gradient array.  By default every leaf
        with ``requires_grad`` that the loss depends on is included.  ``wrt``
        adds specific tensors (intermediates allowed); ``include_leaves=False``
        drops leaves not named in ``wrt``.
        """
        if self._used:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._tracked:
            raise TapeError("loss is not on this tape")
        self._used = True
        wanted = {} if wrt is None else {id(t): t for t in wrt}

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        kept: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted:
                kept[id(node.out)] = g
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                is_leaf = key not in self._tracked
                if is_leaf and not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    ig = _unbroadcast(ig, inp.shape)
                grads[key] = grads[key] + ig if key in grads else ig
                if is_leaf:
                    leaves[key] = inp

        result: dict[Tensor, np.ndarray] = {}
        if include_leaves:
            for key, t in leaves.items():
                result[t] = grads[key].astype(t.dtype, copy=False)
        for key, t in wanted.items():
            g = kept.get(key, grads.get(key))
            result[t] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        return result


def gradients(loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> tuple[Tensor, list[np.ndarray]]:
    """Evaluate ``loss_fn`` on a fresh tape and return (loss, grads for ``wrt``).

    Intermediate tensors cannot be requested here; use leaves.
    """
    saved = [t.requires_grad for t in wrt]
    for t in wrt:
        t.requires_grad = True
    try:
        with Tape() as tape:
            loss = loss_fn()
        g = tape.backward(loss, wrt=wrt)
    finally:
        for t, s in zip(wrt, saved):
            t.requires_grad = s
    return loss, [g[t] for t in wrt]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(i, Tensor) and tape.is_tracked(i) for i in inputs):
        tape.record(out, inputs, backward)
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
            if m != n:
                raise ShapeError(f"{what}: axis {axis} differs ({m} vs {n})")
        raise ShapeError(f"{what}: rank differs ({a.ndim} vs {b.ndim})")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    return _make(np.add(_data(a), _data(b)), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    return _make(np.subtract(_data(a), _data(b)), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    return _make(-_data(a), (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def tabs(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient passes where ``a > floor``."""
    x = a.data
    return _make(np.maximum(x, floor), (a,), lambda g: (g * (x > floor),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) with the x > 20 branch returning x directly
    safe = np.minimum(x, 20.0)
    return np.where(x > 20.0, x, np.log1p(np.exp(safe)))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _make(_softplus(x), (a,), lambda g: (g * _sigmoid(x),))


def mish(a: Tensor) -> Tensor:
    """``x * tanh(softplus(x))``."""
    x = a.data
    tsp = np.tanh(_softplus(x))
    out = x * tsp

    def backward(g):
        return (g * (tsp + x * (1.0 - tsp * tsp) * _sigmoid(x)),)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def gated_activation(a: Tensor, b: Tensor) -> Tensor:
    """``tanh(a) * sigmoid(b)``, the WaveNet gate."""
    _check_same_shape(a, b, "gated_activation")
    ta = np.tanh(a.data)
    sb = _sigmoid(b.data)

    def backward(g):
        return g * (1.0 - ta * ta) * sb, g * ta * sb * (1.0 - sb)

    return _make(ta * sb, (a, b), backward)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    out = x.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    axes = _norm_axis(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = a.data
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    out = (x.sum(axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (a,), backward)


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis (axis 1 for ``(B, C, T)``)."""
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1) -> Tensor:
    """Mean categorical cross-entropy of integer ``target`` under ``logits``.

    ``target`` has the logits' shape with ``axis`` removed.
    """
    x = logits.data
    target = np.asarray(target)
    expected = x.shape[:axis] + x.shape[axis + 1:]
    if target.shape != expected:
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {expected}")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    idx = np.expand_dims(target.astype(np.intp), axis)
    picked = np.take_along_axis(logp, idx, axis=axis)
    n = picked.size
    out = np.asarray(-picked.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=axis) - 1.0, axis=axis)
        return (grad * (g / n),)

    return _make(out, (logits,), backward)


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of 0/1 ``target`` under ``logits``."""
    x = logits.data
    y = np.asarray(target, dtype=x.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: target shape {y.shape} != {x.shape}")
    # log(1 + e^-|x|) + max(x, 0) - x*y
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(loss.sum(dtype=np.float64) / n, dtype=x.dtype)
    return _make(out, (logits,), lambda g: ((_sigmoid(x) - y) * (g / n),))


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, shape) -> Tensor:
    x = a.data
    return _make(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    x = a.data
    out = np.transpose(x, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.ascontiguousarray(out), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    x = a.data
    out = x[index]

    def backward(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-2]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside {a.shape[-2]} channels")
    return getitem(a, (Ellipsis, slice(start, stop), slice(None)))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along the channel axis (second to last) by default."""
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    ref = datas[0]
    ax = axis % ref.ndim
    for i, d in enumerate(datas[1:], 1):
        if d.ndim != ref.ndim:
            raise ShapeError(f"concat: operand {i} rank {d.ndim} != {ref.ndim}")
        for k in range(ref.ndim):
            if k != ax and d.shape[k] != ref.shape[k]:
                raise ShapeError(f"concat: operand {i} axis {k} is {d.shape[k]}, expected {ref.shape[k]}")
    out = np.concatenate(datas, axis=ax)
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(datas)))

    return _make(out, tuple(tensors), backward)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., j] = a[..., index[j]]``.

    ``index`` may be any integer array; the output shape is
    ``a.shape[:-1] + index.shape``.
    """
    x = a.data
    index = np.asarray(index, dtype=np.intp)
    n = x.shape[-1]
    out = x[..., index]

    def backward(g):
        lead = x.shape[:-1]
        gf = g.reshape(int(np.prod(lead, dtype=np.int64)), index.size)
        flat = index.reshape(-1)
        res = np.empty((gf.shape[0], n), dtype=x.dtype)
        for r in range(gf.shape[0]):
            res[r] = np.bincount(flat, weights=gf[r], minlength=n)
        return (res.reshape(x.shape),)

    return _make(out, (a,), backward)


def group(x: Tensor, g: int) -> Tensor:
    """Fold time into channels: ``(.., C, T) -> (.., C*g, T/g)``.

    Output channel ``c*g + j`` at step ``t`` holds input ``[c, t*g + j]``.
    """
    *lead, c, t = x.shape
    if t % g:
        raise ShapeError(f"group: time length {t} not divisible by group size {g}")
    if g == 1:
        return x
    y = reshape(x, (*lead, c, t // g, g))
    y = transpose(y, (*range(len(lead)), len(lead), len(lead) + 2, len(lead) + 1))
    return reshape(y, (*lead, c * g, t // g))


def ungroup(x: Tensor, g: int) -> Tensor:
    """Inverse of :func:`group`."""
    *lead, cg, t = x.shape
    if cg % g:
        raise ShapeError(f"ungroup: channels {cg} not divisible by group size {g}")
    if g == 1:
        return x
    y = reshape(x, (*lead, cg // g, g, t))
    y = transpose(y, (*range(len(lead)), len(lead), len(lead) + 2, len(lead) + 1))
    return reshape(y, (*lead, cg // g, t * g))


# ---------------------------------------------------------------- convolution

def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (C, T) or (B, C, T), got rank {x.ndim}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution with symmetric zero padding to keep length.

    ``out[c, t] = sum_{i,k} w[c, i, k] * x_pad[i, t + (k - K//2) * dilation]``
    """
    xd, squeeze = _as_batched(x.data)
    w = weight.data
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be (C_out, C_in, K), got rank {w.ndim}")
    c_out, c_in, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if dilation < 1:
        raise ShapeError(f"conv1d: dilation must be >= 1, got {dilation}")
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv1d: input channel axis is {xd.shape[1]}, weight expects {c_in}")
    b, _, t = xd.shape
    pad = dilation * (k // 2)
    # per-tap matrices must be contiguous or matmul leaves the BLAS path
    taps = np.ascontiguousarray(w.transpose(2, 0, 1))
    if k == 1:
        out = np.matmul(taps[0], xd)
        xp = xd
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
        out = np.matmul(taps[0], xp[:, :, 0:t])
        for j in range(1, k):
            s = j * dilation
            out += np.matmul(taps[j], xp[:, :, s:s + t])
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias axis 0 is {bias.shape}, expected ({c_out},)")
        out += bias.data[:, None]
    result = out[0] if squeeze else out

    def backward(g):
        gb = g[None] if squeeze else g
        gw = np.empty_like(w)
        gx = np.zeros_like(xp)
        taps_t = np.ascontiguousarray(w.transpose(2, 1, 0))
        for j in range(k):
            s = j * dilation
            win = xp[:, :, s:s + t]
            gw[:, :, j] = np.tensordot(gb, win, axes=([0, 2], [0, 2]))
            gx[:, :, s:s + t] += np.matmul(taps_t[j], gb)
        if k > 1:
            gx = gx[:, :, pad:pad + t]
        gx = gx[0] if squeeze else gx
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2), dtype=np.float64).astype(w.dtype))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(result, inputs, backward)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed convolution that upsamples length ``T`` to exactly ``T*stride``.

    ``weight`` is ``(C_in, C_out, K)`` with ``K >= stride``.  The full output of
    length ``(T-1)*stride + K`` is cropped starting at ``(K - stride)//2``.
    """
    xd, squeeze = _as_batched(x.data)
    w = weight.data
    c_in, c_out, k = w.shape
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv_transpose1d: input channel axis is {xd.shape[1]}, weight expects {c_in}")
    if k < stride:
        raise ShapeError(f"conv_transpose1d: kernel {k} shorter than stride {stride}")
    b, _, t = xd.shape
    full_len = (t - 1) * stride + k
    off = (k - stride) // 2
    full = np.zeros((b, c_out, full_len), dtype=np.result_type(xd, w))
    taps_t = np.ascontiguousarray(w.transpose(2, 1, 0))
    for j in range(k):
        full[:, :, j:j + (t - 1) * stride + 1:stride] += np.matmul(taps_t[j], xd)
    out = full[:, :, off:off + t * stride]
    if bias is not None:
        out = out + bias.data[:, None]
    result = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        gb = g[None] if squeeze else g
        gfull = np.zeros((b, c_out, full_len), dtype=gb.dtype)
        gfull[:, :, off:off + t * stride] = gb
        gx = np.zeros_like(xd)
        gw = np.empty_like(w)
        taps = np.ascontiguousarray(w.transpose(2, 0, 1))
        for j in range(k):
            gj = gfull[:, :, j:j + (t - 1) * stride + 1:stride]
            gx += np.matmul(taps[j], gj)
            gw[:, :, j] = np.tensordot(xd, gj, axes=([0, 2], [0, 2]))
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2), dtype=np.float64).astype(w.dtype))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(result, inputs, backward)


# ---------------------------------------------------------------- spectral / linear

def rfft_magnitude(frames: Tensor, n_fft: int, power_floor: float = 1e-14) -> Tensor:
    """``|rfft(frames, n_fft)|`` along the last axis.

    Power is clamped at ``power_floor`` before the square root so the gradient
    stays finite at empty bins.
    """
    x = frames.data
    n = x.shape[-1]
    spec = np.fft.rfft(x, n=n_fft, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    clamped = np.maximum(power, power_floor)
    mag = np.sqrt(clamped).astype(x.dtype)

    def backward(g):
        scale = np.where(power > power_floor, g / mag, 0.0)
        gs = spec * scale
        # adjoint of the real-input DFT restricted to the kept half-spectrum
        if n_fft % 2 == 0:
            gs[..., 1:-1] *= 0.5
        else:
            gs[..., 1:] *= 0.5
        gx = np.fft.irfft(gs, n=n_fft, axis=-1) * n_fft
        return (gx[..., :n].astype(x.dtype),)

    return _make(mag, (frames,), backward)


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a fixed linear operator given its forward and adjoint actions."""
    out = np.asarray(forward(x.data))
    return _make(out.astype(x.dtype, copy=False), (x,), lambda g: (np.asarray(adjoint(g)).astype(x.dtype, copy=False),))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


def no_tape():
    """Context manager that suspends recording on the current thread."""
    return _NoTape()


class _NoTape:
    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
