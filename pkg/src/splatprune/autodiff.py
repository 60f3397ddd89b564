"""Small tape-based reverse-mode differentiation over numpy arrays.

Every op appends a record to the tape of its inputs; records are created in
topological order, so ``Tape.backward`` walks them in reverse once.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    loss = ad.sum(ad.matmul(x, w))
    grads = tape.backward(loss)   # {w: d loss / d w}

Shapes are explicit: the only broadcasting allowed is adding a trailing
bias vector.  Storage is float32 unless the tape is created with
``dtype=np.float64`` (used for tight gradient checks).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "id", "requires_grad", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", requires_grad: bool, name: str | None = None):
        if data.ndim > 4:
            raise ShapeError(f"tensors have at most 4 dims, got shape {data.shape}")
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.id = tape._next_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._ids = 0
        self._done = False
        self.leaves: list[Tensor] = []

    def _next_id(self) -> int:
        self._ids += 1
        return self._ids

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=self.dtype), self, True, name)
        self.leaves.append(t)
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), self, False, name)

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        """Add an op result.  ``backward(grad_out)`` returns one gradient (or None) per input."""
        for t in inputs:
            if t.tape is not self:
                raise ValueError("cannot mix tensors from different tapes")
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(np.asarray(data, dtype=self.dtype), self, needs)
        if needs:
            self._records.append((out, tuple(inputs), backward))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._done:
            raise RuntimeError("backward already ran on this tape; create a new tape")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._done = True
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(out.id, None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=self.dtype)
                if gi.shape != t.shape:
                    raise ShapeError(f"gradient shape {gi.shape} does not match input shape {t.shape}")
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        return {leaf: grads.get(leaf.id, np.zeros_like(leaf.data)) for leaf in self.leaves}


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias of shape ``(a.shape[-1],)``."""
    if a.shape == b.shape:
        return a.tape.record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        axes = tuple(range(a.ndim - 1))
        return a.tape.record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a.tape.record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a.tape.record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)`` with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return a.tape.record(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))]

    return tensors[0].tape.record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return a.tape.record(np.array(out), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return a.tape.record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return a.tape.record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new axis and repeat ``size`` times along it."""
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), size, axis=ax)
    return a.tape.record(out, (a,), lambda g: (g.sum(axis=ax),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape.record(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return a.tape.record(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then ``* gamma + beta``."""
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: shape mismatch {a.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    axes = tuple(range(a.ndim - 1))

    def backward(g):
        gx = g * gamma.data
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return ga, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return a.tape.record(out, (a, gamma, beta), backward)


def gather(a: Tensor, indices) -> Tensor:
    """Rows ``a[indices]`` along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-D, got shape {idx.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record(a.data[idx], (a,), backward)


def scatter_add(a: Tensor, indices, size: int) -> Tensor:
    """``out[indices[i]] += a[i]`` into ``size`` rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add: indices shape {idx.shape} vs input {a.shape}")
    out = np.zeros((size,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, idx, a.data)
    return a.tape.record(out, (a,), lambda g: (g[idx],))


def sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return a.tape.record(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def custom_node(inputs: Sequence[Tensor], forward: Callable, backward: Callable) -> Tensor:
    """Wrap an external function.

    ``forward(*arrays) -> array``; ``backward(grad_out) -> sequence of input gradients``.
    Inputs are handed over as float64 copies so external code can run in double precision.
    """
    inputs = list(inputs)
    out = forward(*[t.data.astype(np.float64) for t in inputs])
    return inputs[0].tape.record(np.asarray(out), inputs, lambda g: backward(g.astype(np.float64)))
