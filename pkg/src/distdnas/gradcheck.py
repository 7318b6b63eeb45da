"""Central-difference gradient checking for every primitive and interaction op.

For each op kind a builder constructs a small random instance whose inputs
and weights are all Params, plus a forward closure. The check compares
analytic gradients of loss = sum(output * R) (R a fixed random projection)
against central differences with step 1e-5 in double precision, and reports
the worst relative error max|a - n| / max(|a|, |n|, eps) over every scalar.
"""

from __future__ import annotations

import numpy as np

from . import ops
from . import tensor as T
from .tensor import Param, Tape
from .util import rng_for

STEP = 1e-5
EPS = 1e-3  # relative-error floor; entries below it are compared absolutely

PRIMITIVES = (
    "matmul", "bmm", "add", "mul", "scale", "concat_feat", "concat_slot",
    "softmax", "sigmoid", "relu", "sum", "mean", "bce", "pairwise_dot",
    "weighted_sum", "gather_rows", "slice", "swap12", "reshape",
)

ALL_KINDS = PRIMITIVES + ops.DENSE_OPS + ops.SPARSE_OPS


def _p(rng, *shape, name="x", lo=-1.0, hi=1.0):
    return Param(rng.uniform(lo, hi, size=shape), name)


def _build_primitive(kind: str, rng):
    b, n, d, m = 2, 3, 4, 3
    if kind == "matmul":
        xs = [_p(rng, b, d), _p(rng, d, m)]
        fwd = lambda tape, ts: T.matmul(ts[0], ts[1])
    elif kind == "bmm":
        xs = [_p(rng, b, n, d), _p(rng, b, d, m)]
        fwd = lambda tape, ts: T.matmul(ts[0], ts[1])
    elif kind == "add":
        xs = [_p(rng, b, d), _p(rng, d)]
        fwd = lambda tape, ts: T.add(ts[0], ts[1])
    elif kind == "mul":
        xs = [_p(rng, b, d), _p(rng, b, d)]
        fwd = lambda tape, ts: T.mul(ts[0], ts[1])
    elif kind == "scale":
        xs = [_p(rng, b, d)]
        fwd = lambda tape, ts: T.scale(ts[0], 1.7)
    elif kind == "concat_feat":
        xs = [_p(rng, b, d), _p(rng, b, m)]
        fwd = lambda tape, ts: T.concat(ts, axis=1)
    elif kind == "concat_slot":
        xs = [_p(rng, b, n, d), _p(rng, b, 2, d)]
        fwd = lambda tape, ts: T.concat(ts, axis=1)
    elif kind == "softmax":
        xs = [_p(rng, b, n, d)]
        fwd = lambda tape, ts: T.softmax(ts[0], axis=2)
    elif kind == "sigmoid":
        xs = [_p(rng, b, d, lo=-2, hi=2)]
        fwd = lambda tape, ts: T.sigmoid(ts[0])
    elif kind == "relu":
        # keep activations away from the kink at 0
        v = rng.uniform(0.05, 1.0, size=(b, d)) * rng.choice([-1.0, 1.0], size=(b, d))
        xs = [Param(v, "x")]
        fwd = lambda tape, ts: T.relu(ts[0])
    elif kind == "sum":
        xs = [_p(rng, b, n, d)]
        fwd = lambda tape, ts: T.reduce_sum(ts[0], axis=1)
    elif kind == "mean":
        xs = [_p(rng, b, d)]
        fwd = lambda tape, ts: T.reduce_mean(ts[0])
    elif kind == "bce":
        xs = [_p(rng, b * d, lo=0.1, hi=0.9)]
        labels = rng.integers(0, 2, size=b * d).astype(float)
        fwd = lambda tape, ts: T.bce(ts[0], labels)
    elif kind == "pairwise_dot":
        xs = [_p(rng, b, n + 1, d)]
        fwd = lambda tape, ts: T.pairwise_dot(ts[0])
    elif kind == "weighted_sum":
        xs = [_p(rng, 5), _p(rng, b, d), _p(rng, b, d), _p(rng, b, d),
              _p(rng, b, d), _p(rng, b, d)]
        fwd = lambda tape, ts: T.weighted_sum(ts[0], ts[1:])
    elif kind == "gather_rows":
        ids = rng.integers(0, 6, size=b * 2)
        xs = [_p(rng, 6, d)]
        fwd = lambda tape, ts: T.gather_rows(ts[0], ids)
    elif kind == "slice":
        xs = [_p(rng, b, n, d)]
        fwd = lambda tape, ts: T.slice_axis(ts[0], 2, 1, 3)
    elif kind == "swap12":
        xs = [_p(rng, b, n, d)]
        fwd = lambda tape, ts: T.swap12(ts[0])
    elif kind == "reshape":
        xs = [_p(rng, b, n, d)]
        fwd = lambda tape, ts: T.reshape(ts[0], (b, n * d))
    else:
        raise ValueError(f"unknown primitive: {kind}")
    return xs, fwd


def _build_interaction(kind: str, rng, dims: ops.OpDims | None):
    if dims is None:
        dims = ops.OpDims(din=5, n_in=3, dim_d=4, dim_s=4, n_slots=3, heads=2)
    b = 2
    xd = Param(rng.uniform(-1, 1, size=(b, dims.din)), "xd")
    xs = Param(rng.uniform(-1, 1, size=(b, dims.n_in, dims.dim_s)), "xs")
    if kind in ops.DENSE_OPS:
        op = ops.make_dense_op(kind, dims, rng)
        leaves = [xd, xs] + op.param_list()
        fwd = lambda tape, ts: op.forward(tape, ts[0], ts[1])
    else:
        op = ops.make_sparse_op(kind, dims, rng)
        leaves = [xd, xs] + op.param_list()
        fwd = lambda tape, ts: op.forward(tape, ts[1])
    return leaves, fwd


def grad_check(kind: str, seed: int = 0, dims: ops.OpDims | None = None) -> float:
    """Worst relative error between analytic and numeric gradients for `kind`."""
    rng = rng_for(seed, "gradcheck", kind)
    if kind in PRIMITIVES:
        leaves, fwd = _build_primitive(kind, rng)
    elif kind in ops.DENSE_OPS + ops.SPARSE_OPS:
        leaves, fwd = _build_interaction(kind, rng, dims)
    else:
        raise ValueError(f"unknown op kind: {kind}")

    proj_holder = {}

    def loss_value() -> float:
        tape = Tape(check_finite=True)
        ts = [tape.param(p) for p in leaves]
        out = fwd(tape, ts)
        if "r" not in proj_holder:
            proj_holder["r"] = rng.uniform(-1, 1, size=out.shape)
        loss = T.reduce_sum(T.mul(out, tape.const(proj_holder["r"])))
        return tape, loss

    tape, loss = loss_value()
    for p in leaves:
        p.zero_grad()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in leaves]

    worst = 0.0
    for p, grad in zip(leaves, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + STEP
            _, lp = loss_value()
            flat[i] = orig - STEP
            _, lm = loss_value()
            flat[i] = orig
            numeric = (float(lp.data) - float(lm.data)) / (2 * STEP)
            denom = max(abs(gflat[i]), abs(numeric), EPS)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
