"""Standalone recommender models: build from a discretized architecture,
train single-pass, evaluate.

A model keeps the supernet's wiring but instantiates only the enabled ops of
each block and sums their outputs with unit weight (the discretization bits
are exact 0/1 selections, no residual mixing weights). With m_stacks > 1 the
whole interaction stack is replicated in parallel with independent
parameters on top of the shared stem/embedding outputs and the copies' final
dense outputs are concatenated before the head.

Training is one pass over the day shards in day order, shuffling within each
day only. Dense parameters step with Adam, embedding rows with sparse
Adagrad, both under a shared linear warmup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import ops
from . import tensor as T
from .metrics import DegenerateLabelsError, Metrics, evaluate_predictions
from .optim import Adam, DivergenceError, SparseAdagrad, warmup_factor
from .supernet import (BinaryArch, SupernetConfig, _Block, block_io_dims)
from .tensor import Param, Tape
from .util import rng_for, load_npz, save_npz_deterministic

CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    arch: BinaryArch
    config: SupernetConfig
    m_stacks: int = 1

    def __post_init__(self):
        if self.m_stacks < 1:
            raise ValueError("m_stacks must be >= 1")
        self.arch.validate()
        if self.arch.n_blocks != self.config.n_blocks:
            raise ValueError("arch/config block count mismatch")

    def to_dict(self) -> dict:
        return {"dense_bits": self.arch.dense_bits.tolist(),
                "sparse_bits": self.arch.sparse_bits.tolist(),
                "config": self.config.summary(),
                "m_stacks": self.m_stacks}

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            arch=BinaryArch(np.array(d["dense_bits"], dtype=np.int64),
                            np.array(d["sparse_bits"], dtype=np.int64)),
            config=SupernetConfig.from_dict(d["config"]),
            m_stacks=int(d["m_stacks"]))


@dataclass
class TrainConfig:
    batch_size: int = 1024
    dense_lr: float = 0.001
    sparse_lr: float = 0.04
    warmup_frac: float = 0.05
    seed: int = 0


class CtrModel:
    """Standalone model for one BinaryArch."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        cfg = spec.config
        self.spec = spec
        self.seed = seed
        rng = rng_for(seed, "model-init")
        self.embeddings = D.make_embedding_tables(cfg.num_sparse, cfg.embed_rows,
                                                  cfg.dim_s, rng)
        self.stem_w, self.stem_b = ops._init_linear(rng, cfg.num_dense, cfg.stem_w, "stem")
        self.copies = []
        for m in range(spec.m_stacks):
            blocks = [_Block(cfg, i, rng,
                             dense_kinds=spec.arch.enabled_dense(i),
                             sparse_kinds=spec.arch.enabled_sparse(i))
                      for i in range(cfg.n_blocks)]
            self.copies.append(blocks)
        self.head_w, self.head_b = ops._init_linear(
            rng, spec.m_stacks * cfg.dim_d, 1, "head")

    def dense_params(self) -> list[Param]:
        params = [self.stem_w, self.stem_b]
        for blocks in self.copies:
            for blk in blocks:
                params.extend(blk.param_list())
        params.extend([self.head_w, self.head_b])
        return params

    def embed_params(self) -> list[Param]:
        return list(self.embeddings)

    def named_params(self) -> dict[str, Param]:
        out = {}
        for f, p in enumerate(self.embeddings):
            out[f"embed.{f}"] = p
        out["stem.w"], out["stem.b"] = self.stem_w, self.stem_b
        for m, blocks in enumerate(self.copies):
            for blk in blocks:
                base = f"copy{m}.block{blk.index}"
                out[f"{base}.merge.w"] = blk.merge_w
                out[f"{base}.merge.b"] = blk.merge_b
                for kind, op in blk.dense_ops.items():
                    for pname, p in op.params.items():
                        out[f"{base}.dense.{kind}.{pname}"] = p
                for kind, op in blk.sparse_ops.items():
                    for pname, p in op.params.items():
                        out[f"{base}.sparse.{kind}.{pname}"] = p
        out["head.w"], out["head.b"] = self.head_w, self.head_b
        return out

    def param_counts(self) -> dict[str, int]:
        embed = sum(p.value.size for p in self.embeddings)
        stem = self.stem_w.value.size + self.stem_b.value.size
        head = self.head_w.value.size + self.head_b.value.size
        interactions = sum(p.value.size for blocks in self.copies
                           for blk in blocks for p in blk.param_list())
        return {"embeddings": embed, "stem": stem, "head": head,
                "interactions": interactions,
                "total": embed + stem + head + interactions}

    def forward(self, tape: Tape, batch: D.Batch) -> T.Tensor:
        cfg = self.spec.config
        xs0 = D.embedding_lookup(tape, self.embeddings, batch.sparse_ids)
        stem = T.relu(ops._linear(tape, tape.const(batch.dense),
                                  self.stem_w, self.stem_b))
        finals = []
        for blocks in self.copies:
            prev1 = prev2 = stem
            xs = xs0
            for blk in blocks:
                try:
                    xd_in = T.concat([prev1, prev2], axis=1)
                    merged = ops.merge_dense_to_sparse(tape, xd_in, xs,
                                                       blk.merge_w, blk.merge_b)
                    d_outs = [op.forward(tape, xd_in, xs)
                              for op in blk.dense_ops.values()]
                    s_outs = [op.forward(tape, merged)
                              for op in blk.sparse_ops.values()]
                    y_d = _sum_outputs(d_outs)
                    y_s = _sum_outputs(s_outs)
                except (T.ShapeError, T.NonFiniteError) as e:
                    raise type(e)(f"block {blk.index}: {e}") from e
                prev2, prev1, xs = prev1, y_d, y_s
            finals.append(prev1)
        hx = finals[0] if len(finals) == 1 else T.concat(finals, axis=1)
        logit = ops._linear(tape, hx, self.head_w, self.head_b)
        return T.reshape(T.sigmoid(logit), (batch.n,))


def _sum_outputs(outs):
    acc = outs[0]
    for o in outs[1:]:
        acc = T.add(acc, o)
    return acc


def build_model(spec: ModelSpec, seed: int = 0) -> CtrModel:
    return CtrModel(spec, seed=seed)


# ---- training -----------------------------------------------------------------


def train_model(model: CtrModel, shard_specs: list[D.ShardSpec],
                cfg: TrainConfig) -> list[float]:
    """One pass over the days in order. Returns the per-step loss curve."""
    specs = sorted(shard_specs, key=lambda s: s.day)
    shards = [s.load() for s in specs]
    total_steps = sum(math.ceil(s.n / cfg.batch_size) for s in shards)
    adam = Adam(model.dense_params(), lr=cfg.dense_lr)
    adagrad = SparseAdagrad(model.embed_params(), lr=cfg.sparse_lr)
    losses: list[float] = []
    step = 0
    for shard in shards:
        for batch in D.shard_iterator(shard, cfg.batch_size, shuffle_seed=cfg.seed):
            step += 1
            tape = Tape(check_finite=False)
            probs = model.forward(tape, batch)
            loss = T.bce(probs, batch.labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(step, "train")
            tape.backward(loss)
            factor = warmup_factor(step, total_steps, cfg.warmup_frac)
            adam.step(factor)
            adagrad.step(factor)
            adam.zero_grad()
            adagrad.zero_grad()
            losses.append(value)
    return losses


def predict(model: CtrModel, shard: D.DayShard, batch_size: int = 8192) -> np.ndarray:
    out = np.empty(shard.n)
    start = 0
    for batch in D.shard_iterator(shard, batch_size, shuffle_seed=None):
        tape = Tape(check_finite=False)
        probs = model.forward(tape, batch)
        out[start:start + batch.n] = probs.data
        start += batch.n
    return out


def evaluate_model(model: CtrModel, shard: D.DayShard,
                   baseline_ne: float | None = None,
                   batch_size: int = 8192) -> Metrics:
    if shard.n == 0:
        raise DegenerateLabelsError("empty evaluation shard")
    probs = predict(model, shard, batch_size=batch_size)
    return evaluate_predictions(probs, shard.labels, baseline_ne=baseline_ne)


# ---- checkpointing --------------------------------------------------------------


def save_checkpoint(path, model: CtrModel, optimizers: tuple | None = None) -> None:
    """Container: ModelSpec + named float64 parameter arrays (+ optimizer state)."""
    arrays = {f"param/{name}": p.value.astype("<f8")
              for name, p in model.named_params().items()}
    meta = {"version": CHECKPOINT_VERSION, "spec": model.spec.to_dict(),
            "seed": model.seed, "has_optimizer": optimizers is not None}
    if optimizers is not None:
        adam, adagrad = optimizers
        for k, v in adam.state_arrays("adam").items():
            arrays[f"opt/{k}"] = v.astype("<f8")
        for k, v in adagrad.state_arrays("adagrad").items():
            arrays[f"opt/{k}"] = v.astype("<f8")
    save_npz_deterministic(path, arrays, meta)


def load_checkpoint(path) -> CtrModel:
    arrays, meta = load_npz(path)
    if meta is None or meta.get("version") != CHECKPOINT_VERSION:
        raise IOError(f"unrecognized checkpoint header in {path}")
    spec = ModelSpec.from_dict(meta["spec"])
    model = CtrModel(spec, seed=int(meta.get("seed", 0)))
    named = model.named_params()
    for name, p in named.items():
        key = f"param/{name}"
        if key not in arrays:
            raise IOError(f"checkpoint missing parameter {name}")
        if arrays[key].shape != p.value.shape:
            raise IOError(f"checkpoint shape mismatch for {name}")
        p.value[...] = arrays[key]
    return model
