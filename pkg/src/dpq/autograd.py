"""Training-time passes for both quantizer approximations.

sx: the forward pass emits the hard nearest-key lookup while the backward
pass differentiates the tempered-softmax relaxation of the same scores
(two-temperature estimator). vq: the forward pass emits the selected
centroid and the backward pass hands the upstream gradient to the query
unchanged (straight-through); centroids move via the pull-to-members
regularizer or an exponential moving average, never via task gradients.

All gradients here are hand-derived and checked against a
central-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DpqConfig,
    QuantizerState,
    group_scores,
    merge_groups,
    normalize_scores,
    split_groups,
)

EMA_COUNT_EPS = 1e-5


@dataclass
class ForwardTrace:
    """Everything one batch's backward pass needs, copied at forward time."""

    cfg: DpqConfig
    n: int
    batch: np.ndarray               # (B,) row indices, repeats allowed
    qb3: np.ndarray                 # (D, B, s) query segments
    key_blocks: np.ndarray          # (G, k, s)
    value_blocks: np.ndarray        # (G, k, s)
    raw_scores: np.ndarray          # (D, B, k) metric scores, higher = closer
    xhat: np.ndarray                # normalized scores before affine
    sel_scores: np.ndarray          # selection quantity (after affine)
    codes: np.ndarray               # (B, D)
    emitted: np.ndarray             # (B, d) forward output
    training: bool
    soft_assign: Optional[np.ndarray] = None   # (D, B, k), sx only
    bn_inv_std: Optional[np.ndarray] = None    # (D, k) when normalization ran
    bn_gamma: Optional[np.ndarray] = None      # (D, k) affine scale, if any
    cos: Optional[dict] = None                 # cosine intermediates

    @property
    def batch_size(self) -> int:
        return self.batch.shape[0]

    def value_blocks_expanded(self) -> np.ndarray:
        if self.cfg.subspace_sharing:
            return np.broadcast_to(
                self.value_blocks, (self.cfg.d_groups,) + self.value_blocks.shape[1:]
            )
        return self.value_blocks

    def key_blocks_expanded(self) -> np.ndarray:
        if self.cfg.subspace_sharing:
            return np.broadcast_to(
                self.key_blocks, (self.cfg.d_groups,) + self.key_blocks.shape[1:]
            )
        return self.key_blocks


@dataclass
class GradientBundle:
    """Co-shaped gradients for one batch; addable across batch shards."""

    d_query: np.ndarray             # (n, d); rows outside the batch are zero
    d_key: np.ndarray               # (G, k, s)
    d_value: np.ndarray             # (G, k, s)
    d_gamma: Optional[np.ndarray] = None
    d_beta: Optional[np.ndarray] = None
    reg_loss: float = 0.0

    def add(self, other: "GradientBundle") -> "GradientBundle":
        self.d_query += other.d_query
        self.d_key += other.d_key
        self.d_value += other.d_value
        if self.d_gamma is not None and other.d_gamma is not None:
            self.d_gamma += other.d_gamma
            self.d_beta += other.d_beta
        self.reg_loss += other.reg_loss
        return self


def _softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(state: QuantizerState, cfg: DpqConfig, batch, training: bool,
             update_running: bool) -> ForwardTrace:
    idx = np.asarray(batch, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("forward pass needs a non-empty batch")
    if idx.min() < 0 or idx.max() >= state.n:
        raise ValueError(
            f"batch indices must lie in [0,{state.n}), got "
            f"[{idx.min()},{idx.max()}]"
        )
    q_rows = state.query[idx]
    scores, detail = group_scores(state, cfg, q_rows, want_detail=True)
    bn_inv_std = None
    if cfg.bn and state.bn is not None:
        bnst = state.bn
        if training:
            if idx.size < 2:
                raise ValueError(
                    "distance normalization needs a batch of at least 2 "
                    "samples during training"
                )
            mean = scores.mean(axis=1)
            var = scores.var(axis=1)
            if update_running:
                m = bnst.momentum
                bnst.running_mean = m * bnst.running_mean + (1.0 - m) * mean
                bnst.running_var = m * bnst.running_var + (1.0 - m) * var
        else:
            mean = bnst.running_mean
            var = bnst.running_var
        xhat, sel = normalize_scores(scores, mean, var, bnst.eps,
                                     bnst.gamma, bnst.beta)
        bn_inv_std = 1.0 / np.sqrt(var + bnst.eps)
        bn_gamma = bnst.gamma.copy() if bnst.gamma is not None else None
    else:
        xhat = sel = scores
        bn_gamma = None
    codes = sel.argmax(axis=2).T.astype(np.int64)   # ties -> smallest code
    values = state.value_view()
    emitted = values.emit(codes)
    key_copy = state.key_blocks.copy()
    value_copy = key_copy if state.tied else state.value_blocks.copy()
    trace = ForwardTrace(
        cfg=cfg,
        n=state.n,
        batch=idx,
        qb3=detail["qb3"].copy(),
        key_blocks=key_copy,
        value_blocks=value_copy,
        raw_scores=scores,
        xhat=xhat,
        sel_scores=sel,
        codes=codes,
        emitted=emitted,
        training=training,
        bn_inv_std=bn_inv_std,
        bn_gamma=bn_gamma,
        cos={k: detail[k] for k in ("qhat", "khat", "qm", "km")}
        if cfg.distance == "cosine" else None,
    )
    return trace


def sx_forward(state: QuantizerState, cfg: DpqConfig, batch, *,
               training: bool = True,
               update_running: Optional[bool] = None) -> ForwardTrace:
    """Softmax-mode forward pass.

    Emits the hard lookup (the zero-temperature path) and retains soft
    assignments at ``tau_backward`` for the backward pass. Setting
    ``tau_forward`` above zero emits the tempered soft mixture instead.
    """
    if cfg.mode != "sx":
        raise ValueError(f"sx_forward requires mode='sx', got {cfg.mode!r}")
    if update_running is None:
        update_running = training
    trace = _forward(state, cfg, batch, training, update_running)
    if training:
        trace.soft_assign = _softmax_lastaxis(trace.sel_scores / cfg.tau_backward)
        if cfg.tau_forward > 0:
            fwd = _softmax_lastaxis(trace.sel_scores / cfg.tau_forward)
            trace.emitted = merge_groups(fwd @ trace.value_blocks_expanded())
    return trace


def vq_forward(state: QuantizerState, cfg: DpqConfig, batch, *,
               training: bool = True,
               update_running: Optional[bool] = None) -> ForwardTrace:
    """Centroid-mode forward pass: emits the nearest centroid per group."""
    if cfg.mode != "vq":
        raise ValueError(f"vq_forward requires mode='vq', got {cfg.mode!r}")
    if update_running is None:
        update_running = training
    return _forward(state, cfg, batch, training, update_running)


def soft_emission(trace: ForwardTrace) -> np.ndarray:
    """The tempered soft output the sx backward pass differentiates."""
    if trace.soft_assign is None:
        raise ValueError("trace has no soft assignments (not an sx trace)")
    return merge_groups(trace.soft_assign @ trace.value_blocks_expanded())


def _scores_backward(trace: ForwardTrace, d_scores: np.ndarray):
    """Push (D,B,k) score gradients into query segments and key blocks."""
    cfg = trace.cfg
    qb3 = trace.qb3
    k3 = trace.key_blocks_expanded()
    if cfg.distance == "dot":
        dqb3 = d_scores @ k3
        dk3 = d_scores.swapaxes(1, 2) @ qb3
    elif cfg.distance == "euclidean":
        row_sum = d_scores.sum(axis=2)      # (D, B)
        col_sum = d_scores.sum(axis=1)      # (D, k)
        dqb3 = -2.0 * (qb3 * row_sum[:, :, None] - d_scores @ k3)
        dk3 = 2.0 * (d_scores.swapaxes(1, 2) @ qb3
                     - k3 * col_sum[:, :, None])
    else:  # cosine; raw_scores are the similarities themselves
        cos = trace.cos
        qhat, khat = cos["qhat"], cos["khat"]
        qm, km = cos["qm"], cos["km"]
        sims = trace.raw_scores
        w_q = (d_scores * sims).sum(axis=2)                     # (D, B)
        a_q = d_scores @ khat
        q_big = (np.linalg.norm(qb3, axis=2) > 1e-12)[:, :, None]
        dqb3 = (a_q - q_big * w_q[:, :, None] * qhat) / qm[:, :, None]
        w_k = (d_scores * sims).sum(axis=1)                     # (D, k)
        a_k = d_scores.swapaxes(1, 2) @ qhat
        k_big = (np.linalg.norm(k3, axis=2) > 1e-12)[:, :, None]
        dk3 = (a_k - k_big * w_k[:, :, None] * khat) / km[:, :, None]
    return dqb3, dk3


def _fold_shared(grad3: np.ndarray, shared: bool) -> np.ndarray:
    return grad3.sum(axis=0, keepdims=True) if shared else grad3


def _scatter_rows(n: int, d: int, batch: np.ndarray, rows: np.ndarray) -> np.ndarray:
    out = np.zeros((n, d))
    if np.unique(batch).size == batch.size:
        out[batch] = rows            # bitwise for duplicate-free batches
    else:
        np.add.at(out, batch, rows)
    return out


def sx_backward(trace: ForwardTrace, upstream: np.ndarray) -> GradientBundle:
    """Exact gradients of the tempered soft output against the upstream.

    Differentiates through the value mixture, the softmax at
    ``tau_backward``, the distance normalization (batch-statistics terms
    included in training mode), and the score metric into query, key,
    value and affine-normalization parameters.
    """
    cfg = trace.cfg
    if trace.soft_assign is None:
        raise ValueError("sx_backward needs a trace from sx_forward")
    b, d = trace.batch_size, cfg.d
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (b, d):
        raise ValueError(
            f"upstream shape {upstream.shape} != ({b}, {d})"
        )
    g3 = split_groups(upstream, cfg.d_groups)                    # (D, B, s)
    v3 = trace.value_blocks_expanded()
    c = trace.soft_assign
    dv3 = c.swapaxes(1, 2) @ g3
    dc = g3 @ v3.swapaxes(1, 2)
    inner = (dc * c).sum(axis=2, keepdims=True)
    d_sel = c * (dc - inner) / cfg.tau_backward
    d_gamma = d_beta = None
    bn_active = trace.bn_inv_std is not None
    if bn_active and trace.bn_gamma is not None:
        d_gamma = (d_sel * trace.xhat).sum(axis=1)
        d_beta = d_sel.sum(axis=1)
        d_xhat = d_sel * trace.bn_gamma[:, None, :]
    else:
        d_xhat = d_sel
    if bn_active:
        inv = trace.bn_inv_std[:, None, :]
        if trace.training:
            mean_d = d_xhat.mean(axis=1, keepdims=True)
            mean_dx = (d_xhat * trace.xhat).mean(axis=1, keepdims=True)
            d_scores = inv * (d_xhat - mean_d - trace.xhat * mean_dx)
        else:
            d_scores = d_xhat * inv
    else:
        d_scores = d_xhat
    dqb3, dk3 = _scores_backward(trace, d_scores)
    d_query = _scatter_rows(trace.n, d, trace.batch, merge_groups(dqb3))
    return GradientBundle(
        d_query=d_query,
        d_key=_fold_shared(dk3, cfg.subspace_sharing),
        d_value=_fold_shared(dv3, cfg.subspace_sharing),
        d_gamma=d_gamma,
        d_beta=d_beta,
        reg_loss=0.0,
    )


def vq_backward(trace: ForwardTrace, upstream: np.ndarray) -> GradientBundle:
    """Straight-through backward: the query receives the upstream as-is.

    Centroid gradients come only from the pull-to-members regularizer
    sum_i ||emitted_i - stop_grad(query_i)||^2: each selected centroid
    accumulates 2*(centroid - query segment) over its batch members,
    scaled by the configured coefficient.
    """
    cfg = trace.cfg
    if cfg.mode != "vq":
        raise ValueError("vq_backward needs a trace from vq_forward")
    b, d = trace.batch_size, cfg.d
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (b, d):
        raise ValueError(f"upstream shape {upstream.shape} != ({b}, {d})")
    d_query = _scatter_rows(trace.n, d, trace.batch, upstream)
    g = trace.key_blocks.shape[0]
    k, s = cfg.k, cfg.subspace_dim
    dv = np.zeros((g, k, s))
    reg_loss = 0.0
    coeff = cfg.reg_coefficient
    if coeff != 0.0:
        e3 = split_groups(trace.emitted, cfg.d_groups)
        diff = e3 - trace.qb3
        reg_loss = coeff * float((diff ** 2).sum())
        pull = 2.0 * coeff * diff
        for j in range(cfg.d_groups):
            tgt = dv[0] if cfg.subspace_sharing else dv[j]
            np.add.at(tgt, trace.codes[:, j], pull[j])
    return GradientBundle(
        d_query=d_query,
        d_key=np.zeros((g, k, s)),
        d_value=dv,
        reg_loss=reg_loss,
    )


def ema_update(state: QuantizerState, trace: ForwardTrace,
               decay: Optional[float] = None) -> QuantizerState:
    """Move centroids toward the running mean of their member queries.

    Per (group, code): count <- decay*count + (1-decay)*members and
    sum <- decay*sum + (1-decay)*sum(member segments); the centroid is
    sum/(count + eps). Replaces gradient updates of the tied key/value
    matrix; codes never selected in the batch only see the count decay.
    """
    cfg = trace.cfg
    if cfg.mode != "vq":
        raise ValueError("ema_update applies to vq mode only")
    if state.ema is None:
        raise ValueError("state has no ema accumulators")
    if decay is None:
        decay = cfg.ema_decay
    if decay is None or not (0.0 <= decay < 1.0):
        raise ValueError(f"decay must be in [0,1), got {decay}")
    g, k, s = state.value_blocks.shape
    members = np.zeros((g, k))
    seg_sums = np.zeros((g, k, s))
    for j in range(cfg.d_groups):
        tgt = 0 if cfg.subspace_sharing else j
        members[tgt] += np.bincount(trace.codes[:, j], minlength=k)
        np.add.at(seg_sums[tgt], trace.codes[:, j], trace.qb3[j])
    ema = state.ema
    ema.counts = decay * ema.counts + (1.0 - decay) * members
    ema.sums = decay * ema.sums + (1.0 - decay) * seg_sums
    state.value_blocks[:] = ema.sums / (ema.counts[:, :, None] + EMA_COUNT_EPS)
    return state
