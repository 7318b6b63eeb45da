"""Day-sharded data provisioning.

Three sources feed the engine: a synthetic CTR generator with planted
pairwise interactions and per-day drift, Criteo-format TSV files (label +
13 integers + 26 hex categoricals) reduced by the hashing trick, and cached
synthetic shards on disk. A :class:`ShardSpec` is a lightweight reference
(picklable, cheap to ship to worker processes); :class:`DayShard` is the
materialized arrays.

The synthetic generator is the primary test bed. Its ground truth logit is
  linear(dense) + sum over planted pairs of <L_i[id_i], L_j[id_j]> + noise
with per-feature latent tables L drawn once from the config seed, so the
label signal genuinely requires second-order feature interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Param, ShapeError, Tape
from .util import fnv1a64, rng_for, load_npz, save_npz_deterministic

SHARD_CACHE_VERSION = 1

_DEFAULT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11))


@dataclass(frozen=True)
class SynthConfig:
    f_dense: int = 13
    f_sparse: int = 26
    cardinality: int = 1000
    n_per_day: int = 20000
    drift: float = 0.25          # day-shift magnitude on dense means / id frequencies
    pairs: tuple = _DEFAULT_PAIRS  # sparse feature pairs with multiplicative effect
    pair_strength: float = 1.5
    latent_dim: int = 4
    label_noise: float = 0.25
    bias: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.cardinality < 2:
            raise ValueError("cardinality must be >= 2")
        if self.drift < 0:
            raise ValueError("drift must be >= 0")
        for i, j in self.pairs:
            if not (0 <= i < self.f_sparse and 0 <= j < self.f_sparse):
                raise ValueError(f"planted pair ({i}, {j}) outside f_sparse={self.f_sparse}")

    def to_dict(self):
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs]
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "pairs" in d:
            d["pairs"] = tuple(tuple(p) for p in d["pairs"])
        return SynthConfig(**d)


@dataclass
class DayShard:
    day: int
    dense: np.ndarray        # (n, f_dense) float64
    sparse_ids: np.ndarray   # (n, f_sparse) int64
    labels: np.ndarray       # (n,) float64 in {0, 1}
    source: str = "synthetic"
    ordered: bool = False    # True: iterate as stored, no reshuffle

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class ShardSpec:
    """Reference to one day of data; load() materializes it."""
    day: int
    kind: str                     # "synth" | "cache" | "tsv"
    synth: SynthConfig | None = None
    path: str | None = None
    embed_rows: int = 1024        # hashing range for tsv categoricals

    def load(self) -> DayShard:
        if self.kind == "synth":
            return generate_synthetic_day(self.synth, self.day)
        if self.kind == "cache":
            return load_shard_cache(self.path)
        if self.kind == "tsv":
            return parse_criteo_tsv(self.path, rows=self.embed_rows, day=self.day)
        raise ValueError(f"unknown shard source kind: {self.kind}")


# ---- synthetic generator -----------------------------------------------------


def _latents(cfg: SynthConfig) -> np.ndarray:
    """Per-feature latent factor tables (f_sparse, cardinality, latent_dim)."""
    rng = rng_for(cfg.seed, "synth", "latents")
    return rng.standard_normal((cfg.f_sparse, cfg.cardinality, cfg.latent_dim)) \
        / np.sqrt(cfg.latent_dim)


def _dense_weights(cfg: SynthConfig) -> np.ndarray:
    rng = rng_for(cfg.seed, "synth", "densew")
    return rng.standard_normal(cfg.f_dense) / np.sqrt(cfg.f_dense)


def true_logits(cfg: SynthConfig, dense: np.ndarray, sparse_ids: np.ndarray) -> np.ndarray:
    """Noise-free ground-truth logit; the Bayes predictor is sigmoid of this."""
    logit = dense @ _dense_weights(cfg) + cfg.bias
    if cfg.pairs:
        lat = _latents(cfg)
        coef = cfg.pair_strength / np.sqrt(len(cfg.pairs))
        for i, j in cfg.pairs:
            vi = lat[i][sparse_ids[:, i]]
            vj = lat[j][sparse_ids[:, j]]
            logit += coef * np.einsum("nk,nk->n", vi, vj)
    return logit


def generate_synthetic_day(cfg: SynthConfig, day: int) -> DayShard:
    """Deterministic in (cfg.seed, day); drift=0 makes all days iid."""
    if day < 1:
        raise ValueError(f"day must be >= 1, got {day}")
    rng = rng_for(cfg.seed, "synth", "day", day)
    n = cfg.n_per_day

    drift_rng = rng_for(cfg.seed, "synth", "drift", day)
    shift = drift_rng.standard_normal(cfg.f_dense)
    shift /= np.linalg.norm(shift)
    dense = rng.standard_normal((n, cfg.f_dense)) + cfg.drift * shift

    base_rng = rng_for(cfg.seed, "synth", "freqbase")
    base_logits = base_rng.standard_normal((cfg.f_sparse, cfg.cardinality))
    tilt = drift_rng.standard_normal((cfg.f_sparse, cfg.cardinality))
    z = base_logits + cfg.drift * tilt
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random((n, cfg.f_sparse))
    sparse_ids = np.empty((n, cfg.f_sparse), dtype=np.int64)
    for f in range(cfg.f_sparse):
        sparse_ids[:, f] = np.searchsorted(cum[f], u[:, f], side="right")
    np.clip(sparse_ids, 0, cfg.cardinality - 1, out=sparse_ids)

    logit = true_logits(cfg, dense, sparse_ids)
    if cfg.label_noise > 0:
        logit = logit + cfg.label_noise * rng.standard_normal(n)
    p = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(n) < p).astype(np.float64)
    return DayShard(day=day, dense=dense, sparse_ids=sparse_ids, labels=labels)


# ---- shard cache -------------------------------------------------------------


def save_shard_cache(path, shard: DayShard, cfg: SynthConfig) -> None:
    meta = {"version": SHARD_CACHE_VERSION, "day": shard.day,
            "source": shard.source, "synth_config": cfg.to_dict()}
    save_npz_deterministic(path, {
        "dense": shard.dense, "sparse_ids": shard.sparse_ids, "labels": shard.labels,
    }, meta)


def load_shard_cache(path) -> DayShard:
    arrays, meta = load_npz(path)
    if meta is None or meta.get("version") != SHARD_CACHE_VERSION:
        raise IOError(f"unrecognized shard cache header in {path}")
    return DayShard(day=int(meta["day"]), dense=arrays["dense"],
                    sparse_ids=arrays["sparse_ids"], labels=arrays["labels"],
                    source=meta.get("source", "synthetic"))


# ---- Criteo TSV --------------------------------------------------------------

N_INT_FIELDS = 13
N_CAT_FIELDS = 26


class MalformedLineError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


def hash_category(token: str, rows: int) -> int:
    """Stable categorical hash (FNV-1a 64, fixed seed) into [0, rows)."""
    return fnv1a64(token.encode("utf-8")) % rows


def parse_criteo_tsv(path, rows: int = 1024, day: int = 1) -> DayShard:
    """Read label \\t 13 ints \\t 26 hex categoricals; empty fields allowed.

    Missing integers become 0; integers are normalized x -> log(1 + max(x, 0)).
    Categoricals (missing ones included, as the empty token) hash into
    [0, rows) with a fixed 64-bit hash.
    """
    dense_rows, id_rows, labels = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 1 + N_INT_FIELDS + N_CAT_FIELDS:
                raise MalformedLineError(line_no, f"expected 40 fields, got {len(fields)}")
            if fields[0] not in ("0", "1"):
                raise MalformedLineError(line_no, f"bad label {fields[0]!r}")
            labels.append(float(fields[0]))
            ints = np.zeros(N_INT_FIELDS)
            for k in range(N_INT_FIELDS):
                tok = fields[1 + k]
                if tok:
                    try:
                        ints[k] = int(tok)
                    except ValueError:
                        raise MalformedLineError(line_no, f"bad integer field {tok!r}") from None
            dense_rows.append(np.log1p(np.maximum(ints, 0.0)))
            id_rows.append([hash_category(fields[1 + N_INT_FIELDS + k], rows)
                            for k in range(N_CAT_FIELDS)])
    if not labels:
        raise IOError(f"no records in {path}")
    return DayShard(day=day, dense=np.array(dense_rows),
                    sparse_ids=np.array(id_rows, dtype=np.int64),
                    labels=np.array(labels), source="tsv")


# ---- embedding tables --------------------------------------------------------


def make_embedding_tables(f_sparse: int, rows: int, dim_s: int, rng) -> list[Param]:
    bound = 1.0 / np.sqrt(dim_s)
    return [Param(rng.uniform(-bound, bound, size=(rows, dim_s)), f"embed{f}")
            for f in range(f_sparse)]


def embedding_lookup(tape: Tape, tables: list[Param], sparse_ids: np.ndarray):
    """Gather one row per feature: (B, F) ids -> (B, F, dim_s) tensor.

    Participates in autodiff; gradients land only on gathered rows.
    """
    if sparse_ids.ndim != 2 or sparse_ids.shape[1] != len(tables):
        raise ShapeError(f"embedding_lookup: ids {sparse_ids.shape} vs {len(tables)} tables")
    b = sparse_ids.shape[0]
    slots = []
    for f, table in enumerate(tables):
        rowt = T.gather_rows(tape.param(table), sparse_ids[:, f])
        slots.append(T.reshape(rowt, (b, 1, table.value.shape[1])))
    return T.concat(slots, axis=1)


# ---- batching ----------------------------------------------------------------


@dataclass
class Batch:
    dense: np.ndarray
    sparse_ids: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.labels.shape[0]


def shard_iterator(shard: DayShard, batch_size: int, shuffle_seed=None):
    """Deterministic permutation, exactly ceil(n/B) batches, last may be short.

    shuffle_seed=None (or an `ordered` shard) iterates in stored order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = shard.n
    if shuffle_seed is None or shard.ordered:
        order = np.arange(n)
    else:
        order = rng_for(shuffle_seed, "shard-perm", shard.day).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dense=shard.dense[idx], sparse_ids=shard.sparse_ids[idx],
                    labels=shard.labels[idx])


def concat_shards(shards: list[DayShard], seed: int) -> DayShard:
    """Day-ordered concatenation with per-day shuffling already applied.

    The result is flagged `ordered`, so iterating it sequentially visits each
    day in order with exactly the permutation that a per-day search would use.
    """
    if not shards:
        raise ValueError("concat_shards: empty")
    shards = sorted(shards, key=lambda s: s.day)
    dense, ids, labels = [], [], []
    for s in shards:
        perm = rng_for(seed, "shard-perm", s.day).permutation(s.n)
        dense.append(s.dense[perm])
        ids.append(s.sparse_ids[perm])
        labels.append(s.labels[perm])
    return DayShard(day=shards[0].day, dense=np.concatenate(dense),
                    sparse_ids=np.concatenate(ids), labels=np.concatenate(labels),
                    source=shards[0].source, ordered=True)
