"""Reverse-mode autodiff over small dense arrays, float64 throughout.

A :class:`Tape` records one forward computation as an ordered list of nodes;
``Tape.backward`` walks the list in reverse exactly once and accumulates
gradients into every differentiable leaf (``Param.grad`` for parameters).
Tensors are thin wrappers around numpy arrays: rank 2 is (batch, feature),
rank 3 is (batch, slot, feature); rank 0/1 shows up only as biases, logits
and reduction outputs.

The op set is fixed and small: matrix products (incl. batched/broadcast),
elementwise add/multiply, concat/slice/reshape/transpose, softmax, sigmoid,
relu, sum/mean, binary cross-entropy, scale-by-constant, pairwise slot inner
products, scalar-weighted sums and embedding row gathers. Each op validates
shapes up front and raises :class:`ShapeError` naming itself, so failures in
deep graphs point at the offending node.

When ``count_macs`` is enabled the tape tallies multiply-accumulates of the
matrix-product ops (and only those) during the forward pass; this is the
instrumented side of the analytic FLOPs oracle (1 MAC = 2 FLOPs, elementwise
work uncounted).
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Backward called on an empty tape or with a foreign/ill-shaped seed."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Param:
    """A trainable array with a persistent gradient accumulator."""

    _ids = itertools.count()
    __slots__ = ("value", "grad", "id", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim > 3:
            raise ShapeError(f"param rank {self.value.ndim} > 3")
        self.grad = np.zeros_like(self.value)
        n = next(Param._ids)
        self.name = name or "param"
        self.id = f"{self.name}#{n}"

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.id}, shape={self.value.shape})"


class Tensor:
    __slots__ = ("data", "tape", "tid", "param", "diff")

    def __init__(self, data: np.ndarray, tape: "Tape", tid: int,
                 param: Param | None = None, diff: bool = True):
        self.data = data
        self.tape = tape
        self.tid = tid
        self.param = param
        self.diff = diff

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tid={self.tid})"


class _Node:
    __slots__ = ("name", "inputs", "out_tid", "backward")

    def __init__(self, name, inputs, out_tid, backward):
        self.name = name
        self.inputs = inputs
        self.out_tid = out_tid
        self.backward = backward


class Tape:
    """One forward computation; topological order is creation order."""

    def __init__(self, check_finite: bool = True, count_macs: bool = False):
        self.check_finite = check_finite
        self.count_macs = count_macs
        self.macs = 0
        self._nodes: list[_Node] = []
        self._next_tid = 0
        self._leaves: list[Tensor] = []
        self._grads: dict[int, np.ndarray] = {}

    # ---- leaf constructors -------------------------------------------------

    def param(self, p: Param) -> Tensor:
        t = self._wrap(p.value, diff=True, param=p)
        self._leaves.append(t)
        return t

    def input(self, data, name: str = "input") -> Tensor:
        """Differentiable leaf that is not a Param (grad queried via grad_of)."""
        t = self._wrap(np.asarray(data, dtype=np.float64), diff=True)
        self._leaves.append(t)
        return t

    def const(self, data) -> Tensor:
        return self._wrap(np.asarray(data, dtype=np.float64), diff=False)

    def _wrap(self, data, diff: bool, param: Param | None = None) -> Tensor:
        t = Tensor(data, self, self._next_tid, param=param, diff=diff)
        self._next_tid += 1
        return t

    def _record(self, name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
                diff: bool = True) -> Tensor:
        out = self._wrap(out_data, diff=diff and any(i.diff for i in inputs))
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"non-finite values in output of '{name}'")
        self._nodes.append(_Node(name, tuple(inputs), out.tid, backward))
        return out

    # ---- reverse pass ------------------------------------------------------

    def backward(self, out: Tensor, seed=None) -> dict[str, np.ndarray]:
        """Accumulate d(seed . out)/d(leaf) into every differentiable leaf.

        Returns a map param-id -> gradient for the Param leaves reached.
        """
        if out.tape is not self:
            raise TapeError("output tensor does not belong to this tape")
        if not self._nodes:
            raise TapeError("backward before forward: tape is empty")
        if not any(n.out_tid == out.tid for n in self._nodes):
            raise TapeError("backward before forward: tensor was not produced on this tape")
        if seed is None:
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != out.data.shape:
                raise TapeError(
                    f"seed shape {seed.shape} does not match output shape {out.data.shape}")

        # Copy-on-store: an array stored under one tensor id must never alias
        # the caller's seed, another id's entry, or a node's out-grad, because
        # accumulation below is in place.
        grads: dict[int, np.ndarray] = {out.tid: seed.copy()}
        for node in reversed(self._nodes):
            g = grads.get(node.out_tid)
            if g is None:
                continue
            for inp, gin in zip(node.inputs, node.backward(g)):
                if gin is None or not inp.diff:
                    continue
                acc = grads.get(inp.tid)
                if acc is None:
                    grads[inp.tid] = gin.copy() if gin.base is not None or gin is g else gin
                else:
                    acc += gin

        self._grads = grads
        out_map: dict[str, np.ndarray] = {}
        for leaf in self._leaves:
            g = grads.get(leaf.tid)
            if g is None or leaf.param is None:
                continue
            leaf.param.grad += g
            out_map[leaf.param.id] = g
        return out_map

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(t.tid)


# ---- helpers ----------------------------------------------------------------


def _same_tape(name: str, *ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise TapeError(f"'{name}': operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swapT(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---- primitive ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims.

    Covers plain (B,K)@(K,M), batched (B,N,K)@(B,K,M), shared-weight
    (B,N,K)@(K,M) and broadcast-left (N,K)@(B,K,M) products.
    """
    tape = _same_tape("matmul", a, b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: ranks {a.ndim}x{b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if tape.count_macs:
        tape.macs += out.size * a.shape[-1]

    a_d, b_d, a_shape, b_shape = a.data, b.data, a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(np.matmul(g, _swapT(b_d)), a_shape) if a.diff else None
        gb = _unbroadcast(np.matmul(_swapT(a_d), g), b_shape) if b.diff else None
        return ga, gb

    return tape._record("matmul", (a, b), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape._record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} * {b.shape}") from e
    a_d, b_d = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_d, a.shape), _unbroadcast(g * a_d, b.shape)

    return tape._record("mul", (a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return a.tape._record("scale", (a,), a.data * c, backward)


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    tape = _same_tape("concat", *ts)
    nd = ts[0].ndim
    for t in ts[1:]:
        if t.ndim != nd:
            raise ShapeError("concat: mixed ranks")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(ts)))

    return tape._record("concat", tuple(ts), out, backward)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = t.data[idx]
    shape = t.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return t.tape._record("slice", (t,), out, backward)


def reshape(t: Tensor, shape) -> Tensor:
    out = np.reshape(t.data, shape)
    old = t.shape

    def backward(g):
        return (np.reshape(g, old),)

    return t.tape._record("reshape", (t,), out, backward)


def swap12(t: Tensor) -> Tensor:
    """Transpose slot and feature axes of a rank-3 tensor."""
    if t.ndim != 3:
        raise ShapeError(f"swap12: rank {t.ndim} != 3")
    out = np.swapaxes(t.data, 1, 2)

    def backward(g):
        return (np.swapaxes(g, 1, 2),)

    return t.tape._record("swap12", (t,), out, backward)


def softmax(t: Tensor, axis: int) -> Tensor:
    z = t.data - np.max(t.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return t.tape._record("softmax", (t,), y, backward)


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * y * (1.0 - y),)

    return t.tape._record("sigmoid", (t,), y, backward)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def backward(g):
        return (g * mask,)

    return t.tape._record("relu", (t,), t.data * mask, backward)


def reduce_sum(t: Tensor, axis=None) -> Tensor:
    out = np.sum(t.data, axis=axis)
    shape = t.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return t.tape._record("sum", (t,), np.asarray(out, dtype=np.float64), backward)


def reduce_mean(t: Tensor, axis=None) -> Tensor:
    count = t.data.size if axis is None else t.shape[axis]
    out = np.mean(t.data, axis=axis)
    shape = t.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return t.tape._record("mean", (t,), np.asarray(out, dtype=np.float64), backward)


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities p against 0/1 labels y.

    Labels are constants. Probabilities at exactly 0 or 1 produce inf, which
    the finite check (or the caller's divergence check) is expected to catch;
    nothing is clamped here.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"bce: labels {y.shape} vs probs {p.shape}")
    n = p.data.size
    p_d = p.data
    with np.errstate(divide="ignore", invalid="ignore"):
        losses = -(y * np.log(p_d) + (1.0 - y) * np.log1p(-p_d))
    out = np.asarray(np.mean(losses))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dp = (-y / p_d + (1.0 - y) / (1.0 - p_d)) / n
        return (g * dp,)

    return p.tape._record("bce", (p,), out, backward)


def pairwise_dot(t: Tensor) -> Tensor:
    """All strictly-upper-triangle inner products between slot vectors.

    (B, N, D) -> (B, N*(N-1)/2), pairs ordered row-major by (i, j), i < j.
    Counts B * P * D multiply-accumulates.
    """
    if t.ndim != 3:
        raise ShapeError(f"pairwise_dot: rank {t.ndim} != 3")
    b, n, d = t.shape
    iu, ju = np.triu_indices(n, k=1)
    xi = t.data[:, iu, :]
    xj = t.data[:, ju, :]
    out = np.einsum("bpd,bpd->bp", xi, xj)
    tape = t.tape
    if tape.count_macs:
        tape.macs += out.size * d
    x_d = t.data

    def backward(g):
        gram = np.zeros((b, n, n))
        gram[:, iu, ju] = g
        gram += _swapT(gram)
        return (np.matmul(gram, x_d),)

    return tape._record("pairwise_dot", (t,), out, backward)


def weighted_sum(w: Tensor, ts: Sequence[Tensor]) -> Tensor:
    """Mix K same-shape tensors with a length-K scalar weight vector."""
    tape = _same_tape("weighted_sum", w, *ts)
    if w.ndim != 1 or w.shape[0] != len(ts):
        raise ShapeError(f"weighted_sum: weights {w.shape} vs {len(ts)} tensors")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: candidate shapes differ: {t.shape} vs {shape}")
    w_d = w.data
    datas = [t.data for t in ts]
    out = sum(w_d[k] * datas[k] for k in range(len(ts)))

    def backward(g):
        gw = np.array([np.sum(g * datas[k]) for k in range(len(ts))])
        return (gw,) + tuple(w_d[k] * g for k in range(len(ts)))

    return tape._record("weighted_sum", (w,) + tuple(ts), out, backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of (R, D) selected by integer ids (B,).

    Gradient is sparse: only gathered rows receive (accumulated)
    contributions; everything else stays exactly zero.
    """
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.shape}, ids {ids.shape}")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"gather_rows: id out of range [0, {rows})")
    out = table.data[ids]
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return table.tape._record("gather_rows", (table,), out, backward)
