"""Choice-block supernet: wiring, Gumbel-softmax mixing and discretization.

The supernet stacks N choice blocks behind a one-layer dense stem and the
per-feature embedding tables. Block i takes the concatenation of the two
previous dense outputs (the stem stands in for missing predecessors) and the
previous sparse output (raw embeddings for block 1), runs all five dense and
five sparse candidate ops, and mixes each family with weights

    p_j = softmax_j((logit_j + g_j) / temperature),

where g is Gumbel noise during search and zero in eval mode. A final linear
head maps the last dense output to a click probability.

Architecture logits live in two (N, 5) parameter matrices initialized to
zero (a uniform prior). Discretization thresholds the noise-free softmax of
the logits at theta and falls back to the argmax bit when a family would
otherwise end up empty.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import data as D
from . import ops
from . import tensor as T
from .ops import DENSE_OPS, SPARSE_OPS, OpDims
from .tensor import Param, Tape
from .util import rng_for, softmax_np, read_json, write_json

ARCH_DOC_VERSION = 1


@dataclass(frozen=True)
class SupernetConfig:
    n_blocks: int = 7
    dim_d: int = 64
    dim_s: int = 8
    n_slots: int = 8
    temperature: float = 1.0
    seed: int = 0
    stem_width: int | None = None   # defaults to dim_d, keeping non-first blocks isomorphic
    num_dense: int = 13
    num_sparse: int = 26
    embed_rows: int = 1024
    heads: int = 2

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if min(self.dim_d, self.dim_s, self.n_slots, self.num_dense,
               self.num_sparse, self.embed_rows) < 1:
            raise ValueError("dims must be >= 1")

    @property
    def stem_w(self) -> int:
        return self.dim_d if self.stem_width is None else self.stem_width

    def summary(self) -> dict:
        d = asdict(self)
        d["dense_ops"] = list(DENSE_OPS)
        d["sparse_ops"] = list(SPARSE_OPS)
        return d

    @staticmethod
    def from_dict(d: dict) -> "SupernetConfig":
        keys = SupernetConfig.__dataclass_fields__.keys()
        return SupernetConfig(**{k: v for k, v in d.items() if k in keys})


def block_io_dims(cfg: SupernetConfig, i: int) -> tuple[int, int]:
    """(dense input width, raw sparse slot count) for block i (0-based)."""
    def width(j: int) -> int:
        return cfg.stem_w if j < 0 else cfg.dim_d
    din = width(i - 1) + width(i - 2)
    sparse_in = cfg.num_sparse if i == 0 else cfg.n_slots
    return din, sparse_in


# ---- architecture weights -----------------------------------------------------


@dataclass
class ArchWeights:
    """Unconstrained per-block logits; probabilities are softmax per row."""
    dense_logits: np.ndarray   # (N, 5)
    sparse_logits: np.ndarray  # (N, 5)

    def copy(self) -> "ArchWeights":
        return ArchWeights(self.dense_logits.copy(), self.sparse_logits.copy())


@dataclass
class ArchProbs:
    dense: np.ndarray   # (N, 5), rows sum to 1
    sparse: np.ndarray  # (N, 5)


@dataclass
class BinaryArch:
    dense_bits: np.ndarray   # (N, 5) of {0, 1}
    sparse_bits: np.ndarray  # (N, 5)

    def validate(self) -> None:
        for name, bits in (("dense", self.dense_bits), ("sparse", self.sparse_bits)):
            if bits.ndim != 2 or bits.shape[1] != len(DENSE_OPS):
                raise ValueError(f"{name} bits shape {bits.shape}")
            if not (bits.sum(axis=1) >= 1).all():
                raise ValueError(f"{name} bits: some block has no op enabled")

    @property
    def n_blocks(self) -> int:
        return self.dense_bits.shape[0]

    def enabled_dense(self, i: int) -> list[str]:
        return [k for j, k in enumerate(DENSE_OPS) if self.dense_bits[i, j]]

    def enabled_sparse(self, i: int) -> list[str]:
        return [k for j, k in enumerate(SPARSE_OPS) if self.sparse_bits[i, j]]


def full_arch(n_blocks: int) -> BinaryArch:
    """Every op enabled: the supernet itself as a standalone model."""
    ones = np.ones((n_blocks, len(DENSE_OPS)), dtype=np.int64)
    return BinaryArch(ones.copy(), ones.copy())


def normalized_arch(arch: ArchWeights) -> ArchProbs:
    """Noise-free temperature-1 probabilities used for aggregation/discretization."""
    return ArchProbs(softmax_np(arch.dense_logits, axis=1),
                     softmax_np(arch.sparse_logits, axis=1))


def discretize(probs: ArchProbs, theta: float) -> BinaryArch:
    """bit = 1 iff p >= theta; empty families fall back to their argmax bit."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")

    def one(p: np.ndarray) -> np.ndarray:
        bits = (p >= theta).astype(np.int64)
        for i in np.flatnonzero(bits.sum(axis=1) == 0):
            bits[i, int(np.argmax(p[i]))] = 1
        return bits

    return BinaryArch(one(probs.dense), one(probs.sparse))


# ---- Gumbel sampling ----------------------------------------------------------


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    """g = -log(-log(u)) for u in the open interval (0, 1)."""
    return -np.log(-np.log(u))


def gumbel_sample(shape, seed: int | None = None, rng=None) -> np.ndarray:
    """Standard Gumbel noise, deterministic given a seed."""
    if rng is None:
        rng = rng_for(0 if seed is None else seed, "gumbel")
    u = rng.random(shape)
    np.clip(u, np.finfo(np.float64).tiny, np.nextafter(1.0, 0.0), out=u)
    return gumbel_from_uniform(u)


def mix_weights(logits: np.ndarray, noise: np.ndarray, temperature: float) -> np.ndarray:
    """softmax((logits + noise) / temperature) along the last axis."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return softmax_np((logits + np.asarray(noise)) / temperature, axis=-1)


# ---- the supernet --------------------------------------------------------------


class _Block:
    """All candidate ops of one choice block plus the shared merger."""

    def __init__(self, cfg: SupernetConfig, i: int, rng,
                 dense_kinds=DENSE_OPS, sparse_kinds=SPARSE_OPS):
        din, sparse_in = block_io_dims(cfg, i)
        self.index = i
        self.din = din
        self.sparse_in = sparse_in
        self.merge_w, self.merge_b = ops.make_merge_params(din, cfg.dim_s, rng)
        self.dense_ops = {
            k: ops.make_dense_op(k, OpDims(din, sparse_in, cfg.dim_d, cfg.dim_s,
                                           cfg.n_slots, cfg.heads), rng)
            for k in dense_kinds}
        self.sparse_ops = {
            k: ops.make_sparse_op(k, OpDims(din, sparse_in + 1, cfg.dim_d, cfg.dim_s,
                                            cfg.n_slots, cfg.heads), rng)
            for k in sparse_kinds}

    def param_list(self) -> list[Param]:
        params = [self.merge_w, self.merge_b]
        for k in DENSE_OPS:
            if k in self.dense_ops:
                params.extend(self.dense_ops[k].param_list())
        for k in SPARSE_OPS:
            if k in self.sparse_ops:
                params.extend(self.sparse_ops[k].param_list())
        return params


class Supernet:
    """Search-time network holding all candidate ops and the arch logits."""

    def __init__(self, cfg: SupernetConfig):
        self.cfg = cfg
        rng = rng_for(cfg.seed, "init")
        self.embeddings = D.make_embedding_tables(cfg.num_sparse, cfg.embed_rows,
                                                  cfg.dim_s, rng)
        self.stem_w, self.stem_b = ops._init_linear(rng, cfg.num_dense, cfg.stem_w, "stem")
        self.blocks = [_Block(cfg, i, rng) for i in range(cfg.n_blocks)]
        self.head_w, self.head_b = ops._init_linear(rng, cfg.dim_d, 1, "head")
        n = cfg.n_blocks
        self.arch_dense = Param(np.zeros((n, len(DENSE_OPS))), "arch.dense")
        self.arch_sparse = Param(np.zeros((n, len(SPARSE_OPS))), "arch.sparse")

    # parameter groups for the optimizer split
    def dense_params(self) -> list[Param]:
        params = [self.stem_w, self.stem_b]
        for blk in self.blocks:
            params.extend(blk.param_list())
        params.extend([self.head_w, self.head_b])
        return params

    def embed_params(self) -> list[Param]:
        return list(self.embeddings)

    def arch_params(self) -> list[Param]:
        return [self.arch_dense, self.arch_sparse]

    def export_arch(self) -> ArchWeights:
        return ArchWeights(self.arch_dense.value.copy(), self.arch_sparse.value.copy())

    def forward(self, tape: Tape, batch: D.Batch, mode: str = "search",
                noise_rng=None) -> T.Tensor:
        """Click probabilities (B,). `search` mixes with Gumbel noise, `eval`
        is the deterministic noise-free pass."""
        cfg = self.cfg
        if mode not in ("search", "eval"):
            raise ValueError(f"mode must be search or eval, got {mode}")
        shape = (cfg.n_blocks, len(DENSE_OPS))
        if mode == "search":
            if noise_rng is None:
                raise ValueError("search mode needs a noise rng")
            g_dense = gumbel_sample(shape, rng=noise_rng)
            g_sparse = gumbel_sample(shape, rng=noise_rng)
        else:
            g_dense = np.zeros(shape)
            g_sparse = np.zeros(shape)

        inv_t = 1.0 / cfg.temperature
        w_dense = T.softmax(T.scale(T.add(tape.param(self.arch_dense),
                                          tape.const(g_dense)), inv_t), axis=1)
        w_sparse = T.softmax(T.scale(T.add(tape.param(self.arch_sparse),
                                           tape.const(g_sparse)), inv_t), axis=1)

        xs = D.embedding_lookup(tape, self.embeddings, batch.sparse_ids)
        stem = T.relu(ops._linear(tape, tape.const(batch.dense), self.stem_w, self.stem_b))
        prev1 = prev2 = stem
        for blk in self.blocks:
            try:
                xd_in = T.concat([prev1, prev2], axis=1)
                merged = ops.merge_dense_to_sparse(tape, xd_in, xs,
                                                   blk.merge_w, blk.merge_b)
                dense_outs = [blk.dense_ops[k].forward(tape, xd_in, xs) for k in DENSE_OPS]
                sparse_outs = [blk.sparse_ops[k].forward(tape, merged) for k in SPARSE_OPS]
                i = blk.index
                wd = T.reshape(T.slice_axis(w_dense, 0, i, i + 1), (len(DENSE_OPS),))
                ws = T.reshape(T.slice_axis(w_sparse, 0, i, i + 1), (len(SPARSE_OPS),))
                y_d = T.weighted_sum(wd, dense_outs)
                y_s = T.weighted_sum(ws, sparse_outs)
            except (T.ShapeError, T.NonFiniteError) as e:
                raise type(e)(f"block {blk.index}: {e}") from e
            prev2, prev1, xs = prev1, y_d, y_s

        logit = ops._linear(tape, prev1, self.head_w, self.head_b)
        return T.reshape(T.sigmoid(logit), (batch.n,))


# ---- document I/O ---------------------------------------------------------------


def write_arch_doc(path, config_summary: dict, arch: ArchWeights | None = None,
                   probs: ArchProbs | None = None,
                   bits: BinaryArch | None = None) -> None:
    doc = {"version": ARCH_DOC_VERSION, "config": config_summary,
           "dense_logits": None, "sparse_logits": None,
           "dense_probs": None, "sparse_probs": None,
           "dense_bits": None, "sparse_bits": None}
    if arch is not None:
        doc["dense_logits"] = arch.dense_logits.tolist()
        doc["sparse_logits"] = arch.sparse_logits.tolist()
        if probs is None:
            probs = normalized_arch(arch)
    if probs is not None:
        doc["dense_probs"] = probs.dense.tolist()
        doc["sparse_probs"] = probs.sparse.tolist()
    if bits is not None:
        doc["dense_bits"] = bits.dense_bits.tolist()
        doc["sparse_bits"] = bits.sparse_bits.tolist()
    write_json(path, doc)


def read_arch_doc(path) -> dict:
    doc = read_json(path)
    if doc.get("version") != ARCH_DOC_VERSION:
        raise IOError(f"unrecognized arch document version in {path}")
    out = {"config": doc["config"]}
    if doc.get("dense_logits") is not None:
        out["arch"] = ArchWeights(np.array(doc["dense_logits"]),
                                  np.array(doc["sparse_logits"]))
    if doc.get("dense_probs") is not None:
        out["probs"] = ArchProbs(np.array(doc["dense_probs"]),
                                 np.array(doc["sparse_probs"]))
    if doc.get("dense_bits") is not None:
        out["bits"] = BinaryArch(np.array(doc["dense_bits"], dtype=np.int64),
                                 np.array(doc["sparse_bits"], dtype=np.int64))
    return out
