"""The ten dense/sparse feature-interaction modules and the block merger.

Dense modules map (Xd: B x din, Xs: B x n_in x dim_s) to a (B, dim_d)
output; sparse modules map an already-merged (B, n_in, dim_s) input to
(B, n_slots, dim_s). Output shapes depend only on the op's construction
dims, never on which other ops run, so any subset can be mixed or summed.

Where a module's natural output width/slot count does not match the target,
the module owns a linear projection and that projection is charged to the
module's FLOPs. The dense->sparse merger (one per choice block) projects the
dense input to dim_s and prepends it as slot 0; DotProduct performs the same
prepend internally with its own projection, which is how sparse information
reaches the dense side.

FLOPs accounting convention: one multiply-accumulate in a matrix or batched
matrix product = 2 FLOPs; biases, activations, softmax and elementwise work
are free. The ``*_op_flops`` functions are the analytic side of the oracle
and must mirror the forward implementations exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Param, ShapeError, Tape, Tensor

DENSE_OPS = ("identity", "linear", "dot_product", "crossnet", "pin")
SPARSE_OPS = ("identity3d", "linear3d", "embed_fc", "transformer", "pma")


@dataclass(frozen=True)
class OpDims:
    """Construction-time shape context for one op instance.

    din: width of the dense block input.
    n_in: slot count of the sparse tensor the op sees. For sparse ops this is
        the post-merge count (raw slots + 1); for DotProduct it is the raw
        block sparse input.
    """
    din: int
    n_in: int
    dim_d: int
    dim_s: int
    n_slots: int
    heads: int = 2


def _init_linear(rng, fan_in: int, fan_out: int, name: str) -> tuple[Param, Param]:
    bound = 1.0 / np.sqrt(fan_in)
    w = Param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name + ".w")
    b = Param(np.zeros(fan_out), name + ".b")
    return w, b


def _init_slot_linear(rng, n_in: int, n_out: int, name: str) -> tuple[Param, Param]:
    # bias is per output slot, broadcast across feature coordinates
    bound = 1.0 / np.sqrt(n_in)
    w = Param(rng.uniform(-bound, bound, size=(n_in, n_out)), name + ".w")
    b = Param(np.zeros((n_out, 1)), name + ".b")
    return w, b


def _linear(tape: Tape, x: Tensor, w: Param, b: Param) -> Tensor:
    return T.add(T.matmul(x, tape.param(w)), tape.param(b))


def _slot_linear(tape: Tape, x: Tensor, w: Param, b: Param) -> Tensor:
    """Linear map along the slot axis: (B, n, d) x (n, m) -> (B, m, d)."""
    y = T.swap12(T.matmul(T.swap12(x), tape.param(w)))
    return T.add(y, tape.param(b))


# ---- merger -----------------------------------------------------------------


def make_merge_params(din: int, dim_s: int, rng) -> tuple[Param, Param]:
    return _init_linear(rng, din, dim_s, "merge")


def merge_dense_to_sparse(tape: Tape, xd: Tensor, xs: Tensor,
                          w: Param, b: Param) -> Tensor:
    """Project the dense input to dim_s and prepend it as slot index 0."""
    if xd.ndim != 2 or xs.ndim != 3:
        raise ShapeError(f"merge: xd {xd.shape}, xs {xs.shape}")
    slot = _linear(tape, xd, w, b)
    slot3 = T.reshape(slot, (slot.shape[0], 1, slot.shape[1]))
    return T.concat([slot3, xs], axis=1)


def merge_flops(din: int, dim_s: int) -> int:
    return 2 * din * dim_s


# ---- dense ops ---------------------------------------------------------------


class DenseOp:
    """One dense interaction module instance with its own parameters."""

    def __init__(self, kind: str, dims: OpDims, rng):
        if kind not in DENSE_OPS:
            raise ValueError(f"unknown dense op kind: {kind}")
        self.kind = kind
        self.dims = dims
        self.params: dict[str, Param] = {}
        p = self.params
        d = dims
        if kind == "identity":
            if d.din != d.dim_d:
                p["proj_w"], p["proj_b"] = _init_linear(rng, d.din, d.dim_d, "identity.proj")
        elif kind == "linear":
            p["w"], p["b"] = _init_linear(rng, d.din, d.dim_d, "linear")
        elif kind == "dot_product":
            p["in_w"], p["in_b"] = _init_linear(rng, d.din, d.dim_s, "dot.in")
            n_pairs = (d.n_in + 1) * d.n_in // 2
            p["out_w"], p["out_b"] = _init_linear(rng, n_pairs, d.dim_d, "dot.out")
        elif kind in ("crossnet", "pin"):
            bound = 1.0 / np.sqrt(d.din)
            p["w"] = Param(rng.uniform(-bound, bound, size=(d.din, d.din)), kind + ".w")
            if kind == "crossnet":
                p["b"] = Param(np.zeros(d.din), "crossnet.b")
            if d.din != d.dim_d:
                p["proj_w"], p["proj_b"] = _init_linear(rng, d.din, d.dim_d, kind + ".proj")

    def forward(self, tape: Tape, xd: Tensor, xs: Tensor) -> Tensor:
        d = self.dims
        if xd.ndim != 2 or xd.shape[1] != d.din:
            raise ShapeError(f"{self.kind}: dense input {xd.shape}, expected (B, {d.din})")
        p = self.params
        if self.kind == "identity":
            if d.din == d.dim_d:
                return xd
            return _linear(tape, xd, p["proj_w"], p["proj_b"])
        if self.kind == "linear":
            return _linear(tape, xd, p["w"], p["b"])
        if self.kind == "dot_product":
            if xs.ndim != 3 or xs.shape[1] != d.n_in or xs.shape[2] != d.dim_s:
                raise ShapeError(
                    f"dot_product: sparse input {xs.shape}, expected (B, {d.n_in}, {d.dim_s})")
            merged = merge_dense_to_sparse(tape, xd, xs, p["in_w"], p["in_b"])
            pairs = T.pairwise_dot(merged)
            return _linear(tape, pairs, p["out_w"], p["out_b"])
        if self.kind == "crossnet":
            gate = T.add(T.matmul(xd, tape.param(p["w"])), tape.param(p["b"]))
            out = T.add(T.mul(xd, gate), xd)
        else:  # pin
            out = T.mul(xd, T.matmul(xd, tape.param(p["w"])))
        if d.din != d.dim_d:
            out = _linear(tape, out, p["proj_w"], p["proj_b"])
        return out

    def flops(self) -> int:
        return dense_op_flops(self.kind, self.dims)

    def param_list(self) -> list[Param]:
        return list(self.params.values())


def dense_op_flops(kind: str, dims: OpDims) -> int:
    d = dims
    if kind == "identity":
        return 2 * d.din * d.dim_d if d.din != d.dim_d else 0
    if kind == "linear":
        return 2 * d.din * d.dim_d
    if kind == "dot_product":
        n_pairs = (d.n_in + 1) * d.n_in // 2
        return 2 * d.din * d.dim_s + n_pairs * 2 * d.dim_s + 2 * n_pairs * d.dim_d
    if kind in ("crossnet", "pin"):
        proj = 2 * d.din * d.dim_d if d.din != d.dim_d else 0
        return 2 * d.din * d.din + proj
    raise ValueError(f"unknown dense op kind: {kind}")


# ---- sparse ops --------------------------------------------------------------


class SparseOp:
    """One sparse interaction module instance; input is the merged tensor."""

    def __init__(self, kind: str, dims: OpDims, rng):
        if kind not in SPARSE_OPS:
            raise ValueError(f"unknown sparse op kind: {kind}")
        self.kind = kind
        self.dims = dims
        self.params: dict[str, Param] = {}
        p = self.params
        d = dims
        needs_slot_proj = d.n_in != d.n_slots
        if kind == "identity3d":
            pass
        elif kind == "linear3d":
            p["w"], p["b"] = _init_linear(rng, d.dim_s, d.dim_s, "linear3d")
        elif kind == "embed_fc":
            p["w"], p["b"] = _init_slot_linear(rng, d.n_in, d.n_slots, "embed_fc")
            needs_slot_proj = False
        elif kind == "transformer":
            if d.dim_s % d.heads:
                raise ValueError(f"transformer: dim_s {d.dim_s} not divisible by heads {d.heads}")
            for nm in ("q", "k", "v", "o"):
                p[nm + "_w"], p[nm + "_b"] = _init_linear(rng, d.dim_s, d.dim_s, "attn." + nm)
        elif kind == "pma":
            p["seeds"] = Param(rng.standard_normal((d.n_slots, d.dim_s)) * 0.1, "pma.seeds")
            p["k_w"], p["k_b"] = _init_linear(rng, d.dim_s, d.dim_s, "pma.k")
            p["v_w"], p["v_b"] = _init_linear(rng, d.dim_s, d.dim_s, "pma.v")
            needs_slot_proj = False
        if needs_slot_proj:
            p["slot_w"], p["slot_b"] = _init_slot_linear(rng, d.n_in, d.n_slots,
                                                         self.kind + ".slot")

    def forward(self, tape: Tape, xs: Tensor) -> Tensor:
        d = self.dims
        if xs.ndim != 3 or xs.shape[1] != d.n_in or xs.shape[2] != d.dim_s:
            raise ShapeError(f"{self.kind}: input {xs.shape}, expected (B, {d.n_in}, {d.dim_s})")
        p = self.params
        if self.kind == "identity3d":
            out = xs
        elif self.kind == "linear3d":
            out = _linear(tape, xs, p["w"], p["b"])
        elif self.kind == "embed_fc":
            return _slot_linear(tape, xs, p["w"], p["b"])
        elif self.kind == "transformer":
            out = self._attention(tape, xs)
        else:  # pma
            return self._pma(tape, xs)
        if d.n_in != d.n_slots:
            out = _slot_linear(tape, out, p["slot_w"], p["slot_b"])
        return out

    def _attention(self, tape: Tape, xs: Tensor) -> Tensor:
        """Multi-head self-attention (Q=K=V=input) with a residual connection."""
        d = self.dims
        p = self.params
        q = _linear(tape, xs, p["q_w"], p["q_b"])
        k = _linear(tape, xs, p["k_w"], p["k_b"])
        v = _linear(tape, xs, p["v_w"], p["v_b"])
        dh = d.dim_s // d.heads
        heads = []
        for h in range(d.heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = T.slice_axis(q, 2, lo, hi)
            kh = T.slice_axis(k, 2, lo, hi)
            vh = T.slice_axis(v, 2, lo, hi)
            scores = T.scale(T.matmul(qh, T.swap12(kh)), 1.0 / np.sqrt(dh))
            heads.append(T.matmul(T.softmax(scores, axis=2), vh))
        attn = heads[0] if len(heads) == 1 else T.concat(heads, axis=2)
        out = _linear(tape, attn, p["o_w"], p["o_b"])
        return T.add(out, xs)

    def _pma(self, tape: Tape, xs: Tensor) -> Tensor:
        """Learnable seed vectors attend over the slots (single head)."""
        d = self.dims
        p = self.params
        k = _linear(tape, xs, p["k_w"], p["k_b"])
        v = _linear(tape, xs, p["v_w"], p["v_b"])
        scores = T.scale(T.matmul(tape.param(p["seeds"]), T.swap12(k)),
                         1.0 / np.sqrt(d.dim_s))
        return T.matmul(T.softmax(scores, axis=2), v)

    def flops(self) -> int:
        return sparse_op_flops(self.kind, self.dims)

    def param_list(self) -> list[Param]:
        return list(self.params.values())


def sparse_op_flops(kind: str, dims: OpDims) -> int:
    d = dims
    slot_proj = 2 * d.n_in * d.n_slots * d.dim_s if d.n_in != d.n_slots else 0
    if kind == "identity3d":
        return slot_proj
    if kind == "linear3d":
        return 2 * d.n_in * d.dim_s * d.dim_s + slot_proj
    if kind == "embed_fc":
        return 2 * d.n_in * d.n_slots * d.dim_s
    if kind == "transformer":
        qkvo = 4 * 2 * d.n_in * d.dim_s * d.dim_s
        attn = 2 * 2 * d.n_in * d.n_in * d.dim_s
        return qkvo + attn + slot_proj
    if kind == "pma":
        kv = 2 * 2 * d.n_in * d.dim_s * d.dim_s
        attn = 2 * 2 * d.n_slots * d.n_in * d.dim_s
        return kv + attn
    raise ValueError(f"unknown sparse op kind: {kind}")


def make_dense_op(kind: str, dims: OpDims, rng) -> DenseOp:
    return DenseOp(kind, dims, rng)


def make_sparse_op(kind: str, dims: OpDims, rng) -> SparseOp:
    return SparseOp(kind, dims, rng)
