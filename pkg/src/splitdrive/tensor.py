"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: a Tape records every primitive applied to tensors that
require gradients; Tape.backward replays the records in reverse. The tape
is rebuilt each forward pass, so clearing between training steps is just
dropping the object. Everything is float64 and single-threaded; tensors
are treated as immutable once created (parameter updates happen between
tapes, never inside one).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()

# Stack of active tapes; ops record on the innermost one only.
_tape_stack: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Dense float64 array plus a handle into the recording tape.

    `requires_grad` marks differentiable leaves (parameters, probe inputs).
    Results of ops get it automatically when a tape is active and any
    input carries it.
    """

    __slots__ = ("values", "node_id", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    # -- method forms of the primitives --------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def abs(self) -> "Tensor":
        return absolute(self)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def detach(self) -> "Tensor":
        return stop_gradient(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientMap:
    """Gradients keyed by node id. Tensors absent from the map (parameters
    unreachable from the loss) read back as zeros of their own shape."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, key) -> bool:
        node_id = key.node_id if isinstance(key, Tensor) else key
        return node_id in self._grads

    def array(self, key) -> np.ndarray:
        """Raw gradient array for a tensor; zeros if unreachable."""
        if isinstance(key, Tensor):
            g = self._grads.get(key.node_id)
            return np.zeros_like(key.values) if g is None else g
        return self._grads[key]

    def __getitem__(self, key) -> Tensor:
        return Tensor(self.array(key))


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("_records", "_out_ids", "_consumed")

    def __init__(self):
        # (out_node_id, vjp) in creation order; creation order is a valid
        # topological order, so a single reverse sweep suffices.
        self._records: list[tuple[int, Callable]] = []
        self._out_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def clear(self) -> None:
        """Drop all records, freeing intermediate buffers held by closures."""
        self._records.clear()
        self._out_ids.clear()
        self._consumed = False

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
        """Reverse sweep from a scalar loss.

        Returns a GradientMap over every node touched; with `params` given,
        each parameter's `.grad` buffer is also populated (zeros when the
        loss does not reach it). A tape can be swept once; rebuild the
        forward pass for another backward.
        """
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; re-run the forward pass")
        if loss.values.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node_id not in self._out_ids:
            raise ValueError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        for out_id, vjp in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for tensor, contrib in vjp(g):
                acc = grads.get(tensor.node_id)
                grads[tensor.node_id] = contrib if acc is None else acc + contrib

        gmap = GradientMap(grads)
        if params is not None:
            for p in params:
                p.grad = gmap.array(p)
        return gmap


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradientMap:
    """Sweep the innermost active tape from `loss`."""
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("no active tape; wrap the forward pass in `with Tape():`")
    return tape.backward(loss, params=params)


def _result(values: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording the vjp when gradients are being traced."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        tape._records.append((out.node_id, vjp))
        tape._out_ids.add(out.node_id)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ---------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that contributes nothing to any ancestor's gradient.

    The returned tensor shares x's buffer (bit-identical forward) and is
    never recorded, so isolation is structural: exact zeros, not small ones.
    """
    return Tensor(x.values, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return ((a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(g, b.values.shape)))

    return _result(a.values + b.values, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return ((a, _unbroadcast(g, a.values.shape)), (b, _unbroadcast(-g, b.values.shape)))

    return _result(a.values - b.values, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (
            (a, _unbroadcast(g * b.values, a.values.shape)),
            (b, _unbroadcast(g * a.values, b.values.shape)),
        )

    return _result(a.values * b.values, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dimensions broadcast like numpy matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    out = np.matmul(a.values, b.values)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return ((a, _unbroadcast(ga, a.values.shape)), (b, _unbroadcast(gb, b.values.shape)))

    return _result(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)

    def vjp(g):
        return ((x, g * (x.values > 0.0)),)

    return _result(out, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    def vjp(g):
        return ((x, g * np.sign(x.values)),)

    return _result(np.abs(x.values), (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return ((x, g * (2.0 * x.values)),)

    return _result(np.square(x.values), (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.values)

    def vjp(g):
        return ((x, g / (2.0 * out)),)

    return _result(out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    def vjp(g):
        return ((x, g / x.values),)

    return _result(np.log(x.values), (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def vjp(g):
        return ((x, g * out),)

    return _result(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.values))

    def vjp(g):
        return ((x, g * out * (1.0 - out)),)

    return _result(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stable softmax. -inf logits come out as exact zeros, which is
    how attention masking stays bit-equivalent to physically removing keys."""
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return ((x, out * (g - inner)),)

    return _result(out, (x,), vjp)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if scale.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise ValueError("layer_norm scale/shift must match the last axis")
    mean = np.mean(x.values, axis=-1, keepdims=True)
    centered = x.values - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = normed * scale.values + shift.values

    def vjp(g):
        g_normed = g * scale.values
        # d/dx of (x - mean)/std with both statistics over the last axis
        m1 = np.mean(g_normed, axis=-1, keepdims=True)
        m2 = np.mean(g_normed * normed, axis=-1, keepdims=True)
        gx = inv_std * (g_normed - m1 - normed * m2)
        axes = tuple(range(g.ndim - 1))
        return (
            (x, gx),
            (scale, np.sum(g * normed, axis=axes)),
            (shift, np.sum(g, axis=axes)),
        )

    return _result(out, (x, scale, shift), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            pieces.append((t, g[tuple(idx)]))
        return pieces

    return _result(out, tensors, vjp)


def _narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.values[idx].copy()

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[idx] = g
        return ((x, gx),)

    return _result(out, (x,), vjp)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> tuple[Tensor, ...]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    pieces, start = [], 0
    for n in sizes:
        pieces.append(_narrow(x, axis, start, n))
        start += n
    return tuple(pieces)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)
    out = x.values[idx]

    def vjp(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return _result(out, (x,), vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return ((x, np.broadcast_to(g.reshape((1,) * x.ndim), x.values.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.values.shape).copy()),)

    return _result(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = np.mean(x.values, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            full = np.broadcast_to(g.reshape((1,) * x.ndim), x.values.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            full = np.broadcast_to(gg, x.values.shape)
        return ((x, full / count),)

    return _result(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.values.reshape(shape)

    def vjp(g):
        return ((x, g.reshape(x.values.shape)),)

    return _result(out, (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.values, axes)

    def vjp(g):
        return ((x, np.transpose(g, inverse)),)

    return _result(out, (x,), vjp)
