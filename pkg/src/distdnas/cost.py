"""Analytic FLOPs accounting, cost-map fitting and the cost-aware regularizer.

``count_flops`` prices a discretized architecture from closed-form per-op
formulas that mirror the forward implementations exactly; the test suite
holds it to an instrumented multiply-add counter on real forward passes
(1 MAC = 2 FLOPs, elementwise work free). Mergers, stem and head are always
enabled and therefore reported separately from the searchable interactions.

The serving-cost signal for the search is built in three steps: sample
random architectures with their exact FLOPs, fit an ordinary-least-squares
cost map from the 0/1 op-selection vector to FLOPs (the true cost is
additive, so OLS is exact up to degenerate columns), then convert the map
into per-op importances by permutation: shuffle one column at a time and
measure the mean-squared-error increase. The normalized importances weight
the regularizer

    R(A, B) = gamma * sum_ij p_ij * s_ij,

whose gradient flows to the architecture logits through the row softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import DENSE_OPS, SPARSE_OPS, OpDims, dense_op_flops, sparse_op_flops, merge_flops
from .supernet import ArchWeights, BinaryArch, SupernetConfig, block_io_dims
from .util import rng_for, softmax_np, write_csv, write_json, read_json

N_OPS = len(DENSE_OPS) + len(SPARSE_OPS)
IMPORTANCE_DOC_VERSION = 1


# ---- FLOPs accounting ----------------------------------------------------------


def op_flops_matrix(cfg: SupernetConfig) -> np.ndarray:
    """(n_blocks, 10) per-example FLOPs of each candidate op, dense ops first."""
    table = np.zeros((cfg.n_blocks, N_OPS))
    for i in range(cfg.n_blocks):
        din, sparse_in = block_io_dims(cfg, i)
        for j, kind in enumerate(DENSE_OPS):
            dims = OpDims(din, sparse_in, cfg.dim_d, cfg.dim_s, cfg.n_slots, cfg.heads)
            table[i, j] = dense_op_flops(kind, dims)
        for j, kind in enumerate(SPARSE_OPS):
            dims = OpDims(din, sparse_in + 1, cfg.dim_d, cfg.dim_s, cfg.n_slots, cfg.heads)
            table[i, len(DENSE_OPS) + j] = sparse_op_flops(kind, dims)
    return table


def op_labels(cfg: SupernetConfig) -> list[str]:
    labels = []
    for i in range(cfg.n_blocks):
        labels.extend(f"b{i + 1}.dense.{k}" for k in DENSE_OPS)
        labels.extend(f"b{i + 1}.sparse.{k}" for k in SPARSE_OPS)
    return labels


@dataclass
class FlopsBreakdown:
    stem: int
    head: int
    mergers: int
    interactions: int

    @property
    def total(self) -> int:
        return self.stem + self.head + self.mergers + self.interactions


def count_flops(arch: BinaryArch, cfg: SupernetConfig, m_stacks: int = 1) -> FlopsBreakdown:
    """Per-example FLOPs of the standalone model built from `arch` with
    `m_stacks` parallel copies of the interaction stack."""
    if arch.n_blocks != cfg.n_blocks:
        raise ValueError(f"arch has {arch.n_blocks} blocks, config {cfg.n_blocks}")
    table = op_flops_matrix(cfg)
    bits = np.concatenate([arch.dense_bits, arch.sparse_bits], axis=1)
    interactions = int((table * bits).sum()) * m_stacks
    mergers = sum(merge_flops(block_io_dims(cfg, i)[0], cfg.dim_s)
                  for i in range(cfg.n_blocks)) * m_stacks
    stem = 2 * cfg.num_dense * cfg.stem_w
    head = 2 * m_stacks * cfg.dim_d * 1
    return FlopsBreakdown(stem=stem, head=head, mergers=mergers, interactions=interactions)


# ---- architecture sampling ------------------------------------------------------


@dataclass
class CostSample:
    arch: BinaryArch
    flops: float


def sample_arch(cfg: SupernetConfig, rng) -> BinaryArch:
    """Each bit Bernoulli(0.5); empty families get one uniformly random bit."""
    def family(n_ops: int) -> np.ndarray:
        bits = (rng.random((cfg.n_blocks, n_ops)) < 0.5).astype(np.int64)
        for i in np.flatnonzero(bits.sum(axis=1) == 0):
            bits[i, rng.integers(n_ops)] = 1
        return bits

    return BinaryArch(family(len(DENSE_OPS)), family(len(SPARSE_OPS)))


def sample_cost_pairs(n: int, cfg: SupernetConfig, seed: int) -> list[CostSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_for(seed, "cost-samples")
    out = []
    for _ in range(n):
        arch = sample_arch(cfg, rng)
        out.append(CostSample(arch, float(count_flops(arch, cfg).total)))
    return out


def _design_matrix(samples: list[CostSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([np.concatenate([s.arch.dense_bits, s.arch.sparse_bits],
                                 axis=1).reshape(-1) for s in samples]).astype(np.float64)
    y = np.array([s.flops for s in samples])
    return x, y


# ---- cost map --------------------------------------------------------------------


@dataclass
class CostMap:
    """OLS regressor from 0/1 op-selection vectors to total FLOPs."""
    coef: np.ndarray            # (n_blocks * 10,)
    intercept: float
    constant_cols: list[int]    # degenerate columns absorbed into the intercept
    train_mse: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return x @ self.coef + self.intercept

    def predict_arch(self, arch: BinaryArch) -> float:
        v = np.concatenate([arch.dense_bits, arch.sparse_bits], axis=1).reshape(-1)
        return float(v @ self.coef + self.intercept)


def fit_cost_map(samples: list[CostSample]) -> CostMap:
    x, y = _design_matrix(samples)
    n, k = x.shape
    col_min = x.min(axis=0)
    col_max = x.max(axis=0)
    constant_cols = list(np.flatnonzero(col_min == col_max))
    active = np.flatnonzero(col_min != col_max)

    design = np.column_stack([x[:, active], np.ones(n)])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError(
            f"cost map design is rank deficient ({n} samples, {len(active)} active "
            "columns); draw more samples")
    sol, *_ = np.linalg.lstsq(design, y, rcond=None)
    coef = np.zeros(k)
    coef[active] = sol[:-1]
    intercept = float(sol[-1])
    mse = float(np.mean((x @ coef + intercept - y) ** 2))
    return CostMap(coef=coef, intercept=intercept,
                   constant_cols=constant_cols, train_mse=mse)


# ---- permutation importance ------------------------------------------------------

N_SHUFFLES = 10


@dataclass
class CostImportance:
    s: np.ndarray      # (n_blocks, 10), normalized to sum 1
    gamma: float

    def dense(self) -> np.ndarray:
        return self.s[:, :len(DENSE_OPS)]

    def sparse(self) -> np.ndarray:
        return self.s[:, len(DENSE_OPS):]


def permutation_importance(cost_map: CostMap, samples: list[CostSample],
                           seed: int, gamma: float = 0.0) -> CostImportance:
    """Breiman-style importance of each (block, op) column of the cost map."""
    if len(samples) < 100:
        raise ValueError("permutation importance needs >= 100 samples")
    x, y = _design_matrix(samples)
    base_mse = float(np.mean((cost_map.predict(x) - y) ** 2))
    rng = rng_for(seed, "perm-importance")
    k = x.shape[1]
    raw = np.zeros(k)
    for j in range(k):
        if cost_map.coef[j] == 0.0:
            continue  # shuffling an ignored column cannot change predictions
        increase = 0.0
        xj = x[:, j].copy()
        for _ in range(N_SHUFFLES):
            x[:, j] = rng.permutation(xj)
            increase += float(np.mean((cost_map.predict(x) - y) ** 2)) - base_mse
        x[:, j] = xj
        raw[j] = increase / N_SHUFFLES
    total = raw.sum()
    if total > 0:
        raw /= total
    n_blocks = k // N_OPS
    return CostImportance(s=raw.reshape(n_blocks, N_OPS), gamma=gamma)


# ---- cost-aware regularizer -------------------------------------------------------


def cost_regularizer(arch: ArchWeights, importance: CostImportance,
                     gamma: float) -> tuple[float, np.ndarray, np.ndarray]:
    """R = gamma * sum_ij p_ij s_ij with p the row softmax of the logits.

    Returns (R, dR/d dense logits, dR/d sparse logits); the gradient is the
    exact softmax Jacobian product, so R is differentiable in the logits.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    s_dense = importance.dense()
    s_sparse = importance.sparse()

    def one(logits, s):
        p = softmax_np(logits, axis=1)
        value = float((p * s).sum())
        inner = (p * s).sum(axis=1, keepdims=True)
        grad = gamma * p * (s - inner)
        return value, grad

    vd, gd = one(arch.dense_logits, s_dense)
    vs, gs = one(arch.sparse_logits, s_sparse)
    return gamma * (vd + vs), gd, gs


# ---- document I/O -----------------------------------------------------------------


def write_importance(path_json, path_csv, importance: CostImportance,
                     cfg: SupernetConfig) -> None:
    write_json(path_json, {
        "version": IMPORTANCE_DOC_VERSION,
        "gamma": importance.gamma,
        "op_order": list(DENSE_OPS) + list(SPARSE_OPS),
        "s": importance.s.tolist(),
    })
    rows = list(zip(op_labels(cfg), importance.s.reshape(-1)))
    write_csv(path_csv, ["op", "importance"], rows)


def read_importance(path_json) -> CostImportance:
    doc = read_json(path_json)
    if doc.get("version") != IMPORTANCE_DOC_VERSION:
        raise IOError(f"unrecognized importance document version in {path_json}")
    return CostImportance(s=np.array(doc["s"]), gamma=float(doc["gamma"]))
