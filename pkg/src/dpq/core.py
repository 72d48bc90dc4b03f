"""Quantizer data model and the inference-side operations.

A vocabulary of n symbols is embedded through a discrete bottleneck: each
symbol gets a length-``d_groups`` code with ``k`` choices per position
(its KD code), produced by nearest-key search per column group of the
query matrix, and decoded back by indexing the value matrix per group and
concatenating. Training-time gradients live in :mod:`dpq.autograd`; this
module owns everything that still exists after training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CorruptCodebookError
from .numerics import Rng, as_matrix, matrix_rank

MODES = ("sx", "vq")
DISTANCES = ("dot", "euclidean", "cosine")

_COS_EPS = 1e-12


@dataclass
class DpqConfig:
    """Hyperparameters of one quantized embedding layer.

    n: vocabulary size, d: embedding width, k: codes per group,
    d_groups: number of column groups (must divide d). ``mode`` picks the
    training approximation: "sx" differentiates a tempered softmax over
    key scores, "vq" passes gradients straight through to the query and
    requires the euclidean metric with tied key/value storage.
    """

    n: int
    d: int
    k: int
    d_groups: int
    mode: str = "sx"
    distance: str = "dot"
    subspace_sharing: bool = False
    tau_forward: float = 0.0
    tau_backward: float = 1.0
    reg_coefficient: float = 1.0
    ema_decay: Optional[float] = None
    bn: bool = True
    bn_affine: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"n and d must be positive, got n={self.n}, d={self.d}")
        if self.k < 2:
            raise ValueError(f"k must be at least 2, got {self.k}")
        if self.d_groups < 1:
            raise ValueError(f"d_groups must be at least 1, got {self.d_groups}")
        if self.d % self.d_groups != 0:
            raise ValueError(
                f"d_groups={self.d_groups} must divide d={self.d}"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.distance not in DISTANCES:
            raise ValueError(
                f"distance must be one of {DISTANCES}, got {self.distance!r}"
            )
        if self.mode == "vq" and self.distance != "euclidean":
            raise ValueError("vq mode supports the euclidean distance only")
        if self.ema_decay is not None:
            if self.mode != "vq":
                raise ValueError("ema_decay applies to vq mode only")
            if not (0.0 <= self.ema_decay < 1.0):
                raise ValueError(f"ema_decay must be in [0,1), got {self.ema_decay}")
        if self.tau_forward < 0:
            raise ValueError(f"tau_forward must be >= 0, got {self.tau_forward}")
        if not (self.tau_backward > 0):
            raise ValueError(f"tau_backward must be > 0, got {self.tau_backward}")
        if self.reg_coefficient < 0:
            raise ValueError("reg_coefficient must be non-negative")
        if not (0.0 <= self.bn_momentum < 1.0):
            raise ValueError(f"bn_momentum must be in [0,1), got {self.bn_momentum}")
        if not (self.bn_eps > 0):
            raise ValueError("bn_eps must be positive")

    @property
    def subspace_dim(self) -> int:
        return self.d // self.d_groups

    @property
    def tied(self) -> bool:
        # vq ties key and value storage so the straight-through estimator
        # stays in one space.
        return self.mode == "vq"

    @property
    def group_count(self) -> int:
        """Number of distinct parameter blocks (1 under subspace sharing)."""
        return 1 if self.subspace_sharing else self.d_groups


@dataclass
class Codebook:
    """n x d_groups integer codes, each in {0..k-1}."""

    codes: np.ndarray
    k: int

    def __post_init__(self):
        c = np.asarray(self.codes)
        if c.ndim != 2:
            raise CorruptCodebookError(f"codes must be 2-D, got shape {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            raise CorruptCodebookError(f"codes must be integers, got {c.dtype}")
        if c.size and (c.min() < 0 or c.max() >= self.k):
            raise CorruptCodebookError(
                f"codes must lie in [0,{self.k}), got range "
                f"[{c.min()},{c.max()}]"
            )
        self.codes = c.astype(np.int64, copy=False)

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def d_groups(self) -> int:
        return self.codes.shape[1]


@dataclass
class ValueView:
    """Per-group access to value blocks, shared or not.

    ``blocks`` has shape (G, k, subspace_dim) with G == 1 when all groups
    share one block, else G == d_groups.
    """

    blocks: np.ndarray
    d_groups: int
    shared: bool

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=np.float64)
        if b.ndim != 3:
            raise ValueError(f"blocks must be (G,k,s), got shape {b.shape}")
        expect = 1 if self.shared else self.d_groups
        if b.shape[0] != expect:
            raise ValueError(
                f"expected {expect} blocks for d_groups={self.d_groups} "
                f"shared={self.shared}, got {b.shape[0]}"
            )
        self.blocks = b

    @property
    def k(self) -> int:
        return self.blocks.shape[1]

    @property
    def subspace_dim(self) -> int:
        return self.blocks.shape[2]

    @property
    def d(self) -> int:
        return self.d_groups * self.subspace_dim

    def group(self, j: int) -> np.ndarray:
        """The (k, subspace_dim) block serving group j."""
        return self.blocks[0 if self.shared else j]

    def expanded(self) -> np.ndarray:
        """Blocks broadcast to (d_groups, k, s); a view when shared."""
        if self.shared:
            return np.broadcast_to(
                self.blocks, (self.d_groups,) + self.blocks.shape[1:]
            )
        return self.blocks

    def emit(self, codes: np.ndarray) -> np.ndarray:
        """Decode (B, d_groups) codes to (B, d) rows by lookup + concat."""
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.d_groups:
            raise CorruptCodebookError(
                f"codes shape {codes.shape} does not match d_groups={self.d_groups}"
            )
        if codes.size and (codes.min() < 0 or codes.max() >= self.k):
            raise CorruptCodebookError(
                f"code out of range for k={self.k}"
            )
        blocks = self.expanded()
        rows = blocks[np.arange(self.d_groups)[None, :], codes, :]  # (B, D, s)
        return rows.reshape(codes.shape[0], self.d)

    def to_matrix(self) -> np.ndarray:
        """Storage layout: (k, d) with group-contiguous columns, or (k, s)."""
        if self.shared:
            return self.blocks[0].copy()
        return self.blocks.transpose(1, 0, 2).reshape(self.k, self.d)

    @classmethod
    def from_matrix(cls, mat: np.ndarray, d_groups: int, shared: bool) -> "ValueView":
        mat = as_matrix(mat, "value matrix")
        if shared:
            return cls(mat[None, :, :].copy(), d_groups, True)
        k, d = mat.shape
        if d % d_groups != 0:
            raise ValueError(f"d_groups={d_groups} must divide value width {d}")
        s = d // d_groups
        return cls(mat.reshape(k, d_groups, s).transpose(1, 0, 2).copy(), d_groups, False)


@dataclass
class BatchNormState:
    """Running statistics (and optional affine) per (group, code)."""

    running_mean: np.ndarray  # (D, k)
    running_var: np.ndarray   # (D, k)
    momentum: float
    eps: float
    gamma: Optional[np.ndarray] = None  # (D, k) when affine
    beta: Optional[np.ndarray] = None


@dataclass
class EmaState:
    """Moving counts and coordinate sums per centroid."""

    counts: np.ndarray  # (G, k)
    sums: np.ndarray    # (G, k, s)


@dataclass
class QuantizerState:
    """Trainable parameters: query rows plus key/value blocks.

    ``value_blocks is key_blocks`` whenever the config ties them (vq); the
    invariant is preserved by holding a single array object.
    """

    query: np.ndarray        # (n, d)
    key_blocks: np.ndarray   # (G, k, s)
    value_blocks: np.ndarray  # (G, k, s); same object as key_blocks when tied
    d_groups: int
    shared: bool
    bn: Optional[BatchNormState] = None
    ema: Optional[EmaState] = None

    @property
    def tied(self) -> bool:
        return self.value_blocks is self.key_blocks

    @property
    def n(self) -> int:
        return self.query.shape[0]

    @property
    def d(self) -> int:
        return self.query.shape[1]

    def value_view(self) -> ValueView:
        return ValueView(self.value_blocks, self.d_groups, self.shared)

    def key_view(self) -> ValueView:
        return ValueView(self.key_blocks, self.d_groups, self.shared)


def init_state(cfg: DpqConfig, rng: Rng | int,
               query_init: Optional[np.ndarray] = None,
               query_scale: Optional[float] = None) -> QuantizerState:
    """Seeded state: uniform key/value blocks at +-0.5/sqrt(d/d_groups).

    ``query_init`` (n x d) replaces the random query matrix, e.g. a table
    to be compressed; otherwise queries are uniform at ``query_scale``
    (default 0.5/sqrt(d)).
    """
    if isinstance(rng, int):
        rng = Rng(rng)
    s = cfg.subspace_dim
    g = cfg.group_count
    if query_init is not None:
        q = as_matrix(query_init, "query_init").copy()
        if q.shape != (cfg.n, cfg.d):
            raise ValueError(
                f"query_init shape {q.shape} != ({cfg.n}, {cfg.d})"
            )
    else:
        lim = 0.5 / np.sqrt(cfg.d) if query_scale is None else query_scale
        q = rng.uniforms((cfg.n, cfg.d), -lim, lim)
    lim_kv = 0.5 / np.sqrt(s)
    key_blocks = rng.uniforms((g, cfg.k, s), -lim_kv, lim_kv)
    if cfg.tied:
        value_blocks = key_blocks
    else:
        value_blocks = rng.uniforms((g, cfg.k, s), -lim_kv, lim_kv)
    bn = None
    if cfg.bn:
        bn = BatchNormState(
            running_mean=np.zeros((cfg.d_groups, cfg.k)),
            running_var=np.ones((cfg.d_groups, cfg.k)),
            momentum=cfg.bn_momentum,
            eps=cfg.bn_eps,
            gamma=np.ones((cfg.d_groups, cfg.k)) if cfg.bn_affine else None,
            beta=np.zeros((cfg.d_groups, cfg.k)) if cfg.bn_affine else None,
        )
    ema = None
    if cfg.ema_decay is not None:
        ema = EmaState(
            counts=np.ones((g, cfg.k)),
            sums=value_blocks.copy(),
        )
    return QuantizerState(
        query=q,
        key_blocks=key_blocks,
        value_blocks=value_blocks,
        d_groups=cfg.d_groups,
        shared=cfg.subspace_sharing,
        bn=bn,
        ema=ema,
    )


def split_groups(x: np.ndarray, d_groups: int) -> np.ndarray:
    """(B, d) rows -> (d_groups, B, s) with contiguous column groups."""
    b, d = x.shape
    return x.reshape(b, d_groups, d // d_groups).transpose(1, 0, 2)


def merge_groups(x3: np.ndarray) -> np.ndarray:
    """Inverse of :func:`split_groups`."""
    d_groups, b, s = x3.shape
    return x3.transpose(1, 0, 2).reshape(b, d_groups * s)


def group_scores(state: QuantizerState, cfg: DpqConfig, q_rows: np.ndarray,
                 want_detail: bool = False):
    """Similarity of each query segment to each key row, higher = closer.

    Returns (scores, detail) where scores is (d_groups, B, k). Euclidean
    scores are negative squared distances so one argmax rule serves every
    metric; ``detail`` carries the intermediates the backward pass needs.
    """
    qb3 = split_groups(q_rows, cfg.d_groups)            # (D, B, s)
    k3 = state.key_view().expanded()                    # (D, k, s)
    k3t = k3.swapaxes(1, 2)                             # (D, s, k)
    detail: dict = {}
    if cfg.distance == "dot":
        scores = qb3 @ k3t
    elif cfg.distance == "euclidean":
        qn = (qb3 ** 2).sum(axis=2)                     # (D, B)
        kn = (k3 ** 2).sum(axis=2)                      # (D, k)
        scores = -(qn[:, :, None] - 2.0 * (qb3 @ k3t) + kn[:, None, :])
    else:  # cosine
        qm = np.maximum(np.linalg.norm(qb3, axis=2), _COS_EPS)  # (D, B)
        km = np.maximum(np.linalg.norm(k3, axis=2), _COS_EPS)   # (D, k)
        qhat = qb3 / qm[:, :, None]
        khat = k3 / km[:, :, None]
        scores = qhat @ khat.swapaxes(1, 2)
        if want_detail:
            detail.update(qhat=qhat, khat=khat, qm=qm, km=km)
    if want_detail:
        detail.update(qb3=qb3, k3=k3)
        return scores, detail
    return scores, None


def normalize_scores(scores: np.ndarray, mean: np.ndarray, var: np.ndarray,
                     eps: float, gamma=None, beta=None):
    """Affine-normalize (D,B,k) scores with per-(group, code) statistics.

    Returns (xhat, selection_scores); they differ only when an affine
    transform is present.
    """
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (scores - mean[:, None, :]) * inv_std[:, None, :]
    if gamma is not None:
        return xhat, xhat * gamma[:, None, :] + beta[:, None, :]
    return xhat, xhat


def discretize(state: QuantizerState, cfg: DpqConfig, row_indices) -> np.ndarray:
    """Codes for the given query rows; (len(row_indices), d_groups).

    Ties in the arg-selection break toward the smallest code so codebooks
    are reproducible. Uses running normalization statistics when distance
    normalization is configured. An empty index list yields an empty
    slice.
    """
    idx = np.asarray(row_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return np.zeros((0, cfg.d_groups), dtype=np.int64)
    if idx.min() < 0 or idx.max() >= state.n:
        raise ValueError(
            f"row indices must lie in [0,{state.n}), got "
            f"[{idx.min()},{idx.max()}]"
        )
    scores, _ = group_scores(state, cfg, state.query[idx])
    if cfg.bn and state.bn is not None:
        b = state.bn
        _, scores = normalize_scores(
            scores, b.running_mean, b.running_var, b.eps, b.gamma, b.beta
        )
    return scores.argmax(axis=2).T.astype(np.int64)  # first max wins ties


def build_codebook(state: QuantizerState, cfg: DpqConfig) -> Codebook:
    """Codes for every vocabulary row."""
    return Codebook(discretize(state, cfg, np.arange(cfg.n)), cfg.k)


def reverse_discretize(codes_row, values: ValueView) -> np.ndarray:
    """Decode one code row to its d-dimensional embedding.

    Pure indexing and concatenation: segment j of the output is row
    codes_row[j] of value block j.
    """
    row = np.asarray(codes_row).reshape(1, -1)
    return values.emit(row)[0]


def build_table(codebook: Codebook, values: ValueView) -> np.ndarray:
    """Reconstruct the full (n, d) embedding table from codes + values."""
    if codebook.d_groups != values.d_groups:
        raise CorruptCodebookError(
            f"codebook has {codebook.d_groups} groups, values {values.d_groups}"
        )
    return values.emit(codebook.codes)


def code_bits(k: int) -> int:
    """Bits to store one code: ceil(log2 k)."""
    return (k - 1).bit_length()


@dataclass
class CompressionStats:
    full_bits: int
    code_bits: int
    value_bits: int

    @property
    def compressed_bits(self) -> int:
        return self.code_bits + self.value_bits

    @property
    def ratio(self) -> float:
        return self.full_bits / self.compressed_bits


def compression_stats(cfg: DpqConfig) -> CompressionStats:
    """Storage accounting in bits.

    The dense table costs 32*n*d; the compressed form costs
    n*d_groups*ceil(log2 k) for codes plus 32*k*d for values (divided by
    d_groups under subspace sharing). Headers and checksums are excluded.
    """
    full = 32 * cfg.n * cfg.d
    codes = cfg.n * cfg.d_groups * code_bits(cfg.k)
    values = 32 * cfg.k * cfg.d
    if cfg.subspace_sharing:
        values //= cfg.d_groups
    return CompressionStats(full_bits=full, code_bits=codes, value_bits=values)


def one_hot_codebook(codebook: Codebook) -> np.ndarray:
    """Binary (n, k*d_groups) matrix: one one-hot block of width k per group."""
    n, d_groups = codebook.codes.shape
    b = np.zeros((n, codebook.k * d_groups))
    cols = codebook.codes + np.arange(d_groups)[None, :] * codebook.k
    b[np.arange(n)[:, None], cols] = 1.0
    return b


def max_one_hot_rank(n: int, k: int, d_groups: int) -> int:
    """Largest rank a one-hot block matrix of this shape can reach.

    Within each of the d_groups blocks the k columns sum to the all-ones
    vector, which removes d_groups - 1 independent directions, capping the
    rank at k*d_groups - (d_groups - 1) regardless of n.
    """
    return min(n, k * d_groups - (d_groups - 1))


@dataclass
class RankCertificate:
    """Structural conditions under which the decoded table has full rank."""

    codebook_max_rank: bool      # one-hot codes reach their maximal rank
    values_full_rank: bool       # every value block has full rank
    capacity_at_least_dim: bool  # k*d_groups >= d
    rank_codebook: int
    rank_table: int
    expected_rank: int           # min(n, d)

    @property
    def conditions(self) -> tuple:
        return (self.codebook_max_rank, self.values_full_rank,
                self.capacity_at_least_dim)

    @property
    def proposition_holds(self) -> bool:
        return all(self.conditions) and self.rank_table == self.expected_rank


def rank_certificate(codebook: Codebook, values: ValueView,
                     tol: float = 1e-9) -> RankCertificate:
    """Check the full-rank conditions and measure the decoded table's rank."""
    n = codebook.n
    k = codebook.k
    d_groups = codebook.d_groups
    d = values.d
    b = one_hot_codebook(codebook)
    rank_b = matrix_rank(b, tol)
    cond_codes = rank_b == max_one_hot_rank(n, k, d_groups)
    cond_values = all(
        matrix_rank(values.group(j), tol) == min(k, values.subspace_dim)
        for j in range(d_groups)
    )
    cond_capacity = k * d_groups >= d
    table = build_table(codebook, values)
    rank_h = matrix_rank(table, tol)
    return RankCertificate(
        codebook_max_rank=cond_codes,
        values_full_rank=cond_values,
        capacity_at_least_dim=cond_capacity,
        rank_codebook=rank_b,
        rank_table=rank_h,
        expected_rank=min(n, d),
    )
