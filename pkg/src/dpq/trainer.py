"""Desk-scale end-to-end training.

Two tasks exercise the full gradient path: reconstructing a fixed
embedding table under mean squared error, and a bag-of-words text
classifier (mean-pooled token vectors, one hidden rectifier layer) whose
input embedding can be a dense table or either quantized variant without
touching the rest of the loop. Optimization is plain SGD with a constant
learning rate; everything is seeded and single-threaded by default, with
an opt-in sharded gradient path.

The offline per-subspace Lloyd clusterer here exists as an oracle for
tests; it shares no code with the quantizer it benchmarks.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import autograd
from .autograd import GradientBundle, ema_update, sx_backward, sx_forward, vq_backward, vq_forward
from .core import (
    Codebook,
    CompressionStats,
    DpqConfig,
    QuantizerState,
    build_codebook,
    build_table,
    compression_stats,
    discretize,
    init_state,
)
from .errors import TrainingDivergedError
from .numerics import Rng, central_diff_grad, softmax_rows

_WS = re.compile(r"[ \t\r\n\f\v]+")


@dataclass
class SgdOptions:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.0
    shards: int = 1


@dataclass
class TrainReport:
    """Per-epoch metrics plus storage accounting.

    ``wall_time_s`` is informational and never serialized, so reports
    from identical runs compare byte-for-byte.
    """

    columns: List[str]
    rows: List[List[float]] = field(default_factory=list)
    compression: Optional[CompressionStats] = None
    wall_time_s: float = 0.0

    def append(self, **kwargs) -> None:
        self.rows.append([kwargs[c] for c in self.columns])

    def column(self, name: str) -> List[float]:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def final(self, name: str) -> float:
        return self.column(name)[-1]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            cells = []
            for v in row:
                if isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                else:
                    cells.append(f"{float(v):.17g}")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


class _Sgd:
    """SGD with optional momentum; zero momentum reduces to the plain step."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        if self.momentum == 0.0:
            param -= self.lr * grad
            return
        key = id(param)
        v = self._velocity.get(key)
        if v is None:
            v = np.zeros_like(param)
            self._velocity[key] = v
        v *= self.momentum
        v += grad
        param -= self.lr * v


def _check_finite(value: float, epoch: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"{what} became non-finite at epoch {epoch}", epoch
        )


def _forward_fn(cfg: DpqConfig):
    return sx_forward if cfg.mode == "sx" else vq_forward


def _backward_fn(cfg: DpqConfig):
    return sx_backward if cfg.mode == "sx" else vq_backward


def _batch_bundle(state, cfg, batch, upstream_fn, shards: int):
    """Forward/backward, optionally over shards reduced by addition.

    ``upstream_fn(trace, lo, hi)`` returns the gradient w.r.t. the
    emitted rows for that slice of the batch. Sharding is unavailable
    with distance normalization, whose statistics couple the whole batch.
    """
    fwd, bwd = _forward_fn(cfg), _backward_fn(cfg)
    if shards <= 1:
        trace = fwd(state, cfg, batch)
        return trace.emitted, trace, bwd(trace, upstream_fn(trace, 0, len(batch)))
    if cfg.bn:
        raise ValueError("sharded execution requires bn=False")
    bounds = np.linspace(0, len(batch), shards + 1).astype(int)
    pieces = [(batch[lo:hi], lo, hi) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]

    def run(piece):
        ids, lo, hi = piece
        trace = fwd(state, cfg, ids)
        return trace, bwd(trace, upstream_fn(trace, lo, hi))

    with ThreadPoolExecutor(max_workers=len(pieces)) as pool:
        results = list(pool.map(run, pieces))
    total = results[0][1]
    for _, bundle in results[1:]:
        total.add(bundle)
    emitted = np.concatenate([trace.emitted for trace, _ in results])
    return emitted, None, total


def _apply_bundle(state: QuantizerState, cfg: DpqConfig, bundle: GradientBundle,
                  opt_q: _Sgd, opt_kv: _Sgd, use_ema: bool) -> None:
    opt_q.step(state.query, bundle.d_query)
    if cfg.mode == "sx":
        opt_kv.step(state.key_blocks, bundle.d_key)
        opt_kv.step(state.value_blocks, bundle.d_value)
        if bundle.d_gamma is not None:
            opt_kv.step(state.bn.gamma, bundle.d_gamma)
            opt_kv.step(state.bn.beta, bundle.d_beta)
    elif not use_ema:
        opt_kv.step(state.value_blocks, bundle.d_value)


@dataclass
class ReconResult:
    state: QuantizerState
    codebook: Codebook
    report: TrainReport


def _sample_centroids(target: np.ndarray, cfg: DpqConfig, rng: Rng) -> np.ndarray:
    """Seeded distinct data segments as initial key/value blocks."""
    s = cfg.subspace_dim
    g = cfg.group_count
    blocks = np.empty((g, cfg.k, s))
    if cfg.subspace_sharing:
        pool = target.reshape(-1, s)  # every (row, group) segment
        picks = rng.sample(pool.shape[0], cfg.k)
        blocks[0] = pool[picks]
    else:
        for j in range(cfg.d_groups):
            picks = rng.sample(cfg.n, cfg.k)
            blocks[j] = target[picks, j * s:(j + 1) * s]
    return blocks


def train_reconstruction(target, cfg: DpqConfig, opt: SgdOptions, *,
                         centroid_init: str = "sample",
                         initial_state: Optional[QuantizerState] = None,
                         on_epoch=None) -> ReconResult:
    """Learn codes and values that reproduce a fixed (n, d) table.

    The query matrix starts as the table itself; centroids start from
    seeded data segments (``centroid_init="uniform"`` keeps the default
    random initialization, ``initial_state`` overrides both). The
    per-epoch metric is the full-table mean squared error of the decoded
    embeddings.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cfg.n, cfg.d):
        raise ValueError(f"target shape {target.shape} != ({cfg.n}, {cfg.d})")
    if centroid_init not in ("sample", "uniform"):
        raise ValueError(f"unknown centroid_init {centroid_init!r}")
    rng = Rng(opt.seed)
    if initial_state is not None:
        state = initial_state
    else:
        state = init_state(cfg, rng, query_init=target)
        if centroid_init == "sample":
            # keys and values start from the same data segments so code j
            # initially decodes to the segment it was selected by
            state.key_blocks[:] = _sample_centroids(target, cfg, rng)
            if not state.tied:
                state.value_blocks[:] = state.key_blocks.copy()
            if state.ema is not None:
                state.ema.sums = state.value_blocks.copy()
                state.ema.counts = np.ones_like(state.ema.counts)
    use_ema = cfg.ema_decay is not None
    opt_q = _Sgd(opt.lr, opt.momentum)
    opt_kv = _Sgd(opt.lr, opt.momentum)
    report = TrainReport(
        columns=["epoch", "loss", "mse", "reg_loss", "code_change"],
        compression=compression_stats(cfg),
    )
    if use_ema and opt.shards > 1:
        raise ValueError("ema updates require shards=1")
    started = time.perf_counter()
    prev_codes = build_codebook(state, cfg)
    order = np.arange(cfg.n)
    for epoch in range(opt.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        epoch_reg = 0.0
        n_batches = 0
        for lo in range(0, cfg.n, opt.batch_size):
            batch = order[lo:lo + opt.batch_size]
            rows = target[batch]

            def upstream(trace, a, b):
                return 2.0 * (trace.emitted - rows[a:b]) / rows.size

            emitted, trace, bundle = _batch_bundle(state, cfg, batch, upstream,
                                                   opt.shards)
            batch_loss = float(((emitted - rows) ** 2).mean())
            _apply_bundle(state, cfg, bundle, opt_q, opt_kv, use_ema)
            if use_ema:
                ema_update(state, trace)
            epoch_loss += batch_loss
            epoch_reg += bundle.reg_loss
            n_batches += 1
        codes = build_codebook(state, cfg)
        mse = float(((build_table(codes, state.value_view()) - target) ** 2).mean())
        _check_finite(mse, epoch, "reconstruction mse")
        change = float((codes.codes != prev_codes.codes).mean())
        prev_codes = codes
        report.append(
            epoch=epoch,
            loss=epoch_loss / max(n_batches, 1),
            mse=mse,
            reg_loss=epoch_reg / max(n_batches, 1),
            code_change=change,
        )
        if on_epoch is not None:
            on_epoch(epoch, state)
    report.wall_time_s = time.perf_counter() - started
    return ReconResult(state=state, codebook=prev_codes, report=report)


# ---------------------------------------------------------------------------
# text data

@dataclass
class Vocabulary:
    tokens: List[str]
    counts: np.ndarray

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class TextDataset:
    docs: List[np.ndarray]
    labels: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.docs) != len(self.labels):
            raise ValueError(
                f"{len(self.docs)} documents vs {len(self.labels)} labels"
            )
        n = len(self.vocab)
        for doc in self.docs:
            if doc.size and (doc.min() < 0 or doc.max() >= n):
                raise ValueError(f"token id out of range for vocab size {n}")

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices) -> "TextDataset":
        indices = np.asarray(indices)
        return TextDataset(
            docs=[self.docs[i] for i in indices],
            labels=self.labels[indices],
            vocab=self.vocab,
        )


def load_text_dataset(path: Union[str, Path], min_count: int = 1) -> TextDataset:
    """Read a one-document-per-line file: ``label<TAB>text``.

    Tokens are split on ASCII whitespace; the vocabulary keeps tokens
    with frequency >= min_count, ids assigned by descending frequency
    (ties alphabetical). Rarer tokens are dropped from the documents.
    Labels map to class ids in sorted order.
    """
    labels_raw: List[str] = []
    token_lists: List[List[str]] = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: missing label<TAB>text separator")
        label, _, text = line.partition("\t")
        labels_raw.append(label)
        token_lists.append([t for t in _WS.split(text) if t])
    if not labels_raw:
        raise ValueError(f"{path}: no documents")
    counts: Dict[str, int] = {}
    for toks in token_lists:
        for t in toks:
            counts[t] = counts.get(t, 0) + 1
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    vocab = Vocabulary(tokens=kept, counts=np.array([counts[t] for t in kept]))
    label_names = sorted(set(labels_raw))
    label_ids = {name: i for i, name in enumerate(label_names)}
    docs = [
        np.array([vocab.token_to_id[t] for t in toks if t in vocab.token_to_id],
                 dtype=np.int64)
        for toks in token_lists
    ]
    return TextDataset(
        docs=docs,
        labels=np.array([label_ids[l] for l in labels_raw]),
        vocab=vocab,
    )


def write_text_dataset(path: Union[str, Path], data: TextDataset) -> None:
    """Inverse of :func:`load_text_dataset` for synthetic corpora."""
    lines = []
    for doc, label in zip(data.docs, data.labels):
        text = " ".join(data.vocab.tokens[t] for t in doc)
        lines.append(f"class{label}\t{text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synthetic_corpus(n_vocab: int = 2000, n_classes: int = 4,
                     n_docs: int = 10000, doc_len: int = 20,
                     signal: float = 0.35, seed: int = 0) -> TextDataset:
    """Class-conditional bag-of-words corpus.

    The vocabulary splits into one indicative block per class plus a
    shared remainder; each token comes from the document's class block
    with probability ``signal``, else uniformly from the whole
    vocabulary. Classes are balanced.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = Rng(seed)
    block = n_vocab // (n_classes + 1)
    labels = np.arange(n_docs, dtype=np.int64) % n_classes
    docs: List[np.ndarray] = []
    for label in labels:
        use_block = rng.uniforms(doc_len) < signal
        background = rng.integers(n_vocab, doc_len)
        indicative = label * block + rng.integers(block, doc_len)
        docs.append(np.where(use_block, indicative, background).astype(np.int64))
    counts = np.zeros(n_vocab, dtype=np.int64)
    for doc in docs:
        np.add.at(counts, doc, 1)
    vocab = Vocabulary(
        tokens=[f"tok{i:05d}" for i in range(n_vocab)],
        counts=counts,
    )
    return TextDataset(docs=docs, labels=labels, vocab=vocab)


def split_dataset(data: TextDataset, heldout_fraction: float, seed: int):
    """(train, heldout) by seeded shuffle."""
    order = np.arange(len(data))
    Rng(seed).shuffle(order)
    cut = int(round(len(data) * (1.0 - heldout_fraction)))
    return data.subset(order[:cut]), data.subset(order[cut:])


# ---------------------------------------------------------------------------
# embedding sources (drop-in interchangeable)

class FullEmbedding:
    """Dense trainable table; the uncompressed baseline.

    Token vectors are averaged over 20-ish tokens before the hidden
    layer, so the init scale stays O(1) rather than shrinking with d.
    """

    def __init__(self, n: int, d: int, seed: int = 0, scale: float = 0.5):
        self.table = Rng(seed).uniforms((n, d), -scale, scale)
        self._ids: Optional[np.ndarray] = None
        self._grad: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.table.shape[0]

    @property
    def d(self) -> int:
        return self.table.shape[1]

    @property
    def reg_loss(self) -> float:
        return 0.0

    def forward(self, ids: np.ndarray, training: bool = True) -> np.ndarray:
        self._ids = np.asarray(ids, dtype=np.int64)
        return self.table[self._ids]

    def inference_table(self) -> np.ndarray:
        return self.table

    def backward(self, upstream: np.ndarray) -> None:
        grad = np.zeros_like(self.table)
        np.add.at(grad, self._ids, upstream)
        self._grad = grad

    def step(self, sgd: _Sgd) -> None:
        sgd.step(self.table, self._grad)

    def codebook(self) -> Optional[Codebook]:
        return None

    def compression(self) -> Optional[CompressionStats]:
        return None


class QuantizedEmbedding:
    """Quantized table in either training mode behind the same interface."""

    def __init__(self, cfg: DpqConfig, seed: int = 0, query_scale: float = 0.5):
        self.cfg = cfg
        self.state = init_state(cfg, Rng(seed), query_scale=query_scale)
        self._trace = None
        self._bundle: Optional[GradientBundle] = None

    @property
    def n(self) -> int:
        return self.cfg.n

    @property
    def d(self) -> int:
        return self.cfg.d

    @property
    def reg_loss(self) -> float:
        return self._bundle.reg_loss if self._bundle is not None else 0.0

    def forward(self, ids: np.ndarray, training: bool = True) -> np.ndarray:
        if not training:
            # inference: plain lookup of discretized codes, no trace
            codes = discretize(self.state, self.cfg, ids)
            return self.state.value_view().emit(codes)
        trace = _forward_fn(self.cfg)(self.state, self.cfg, ids, training=True)
        self._trace = trace
        return trace.emitted

    def inference_table(self) -> np.ndarray:
        """Decode the whole vocabulary once; lookups then cost nothing."""
        return build_table(self.codebook(), self.state.value_view())

    def backward(self, upstream: np.ndarray) -> None:
        self._bundle = _backward_fn(self.cfg)(self._trace, upstream)

    def step(self, sgd: _Sgd) -> None:
        use_ema = self.cfg.ema_decay is not None
        _apply_bundle(self.state, self.cfg, self._bundle, sgd, sgd, use_ema)
        if use_ema:
            ema_update(self.state, self._trace)

    def codebook(self) -> Codebook:
        return build_codebook(self.state, self.cfg)

    def compression(self) -> CompressionStats:
        return compression_stats(self.cfg)


@dataclass
class ClassifierModel:
    """Mean-pooled bag-of-words classifier with one hidden layer.

    The embedding source is interchangeable (dense or quantized); hidden
    and output shapes depend only on the embedding width.
    """

    embedding: object
    w1: np.ndarray  # (d, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, classes)
    b2: np.ndarray

    @classmethod
    def build(cls, embedding, hidden: int, classes: int, seed: int = 0) -> "ClassifierModel":
        rng = Rng(seed)
        d = embedding.d
        lim1 = np.sqrt(6.0 / (d + hidden))
        lim2 = np.sqrt(6.0 / (hidden + classes))
        return cls(
            embedding=embedding,
            w1=rng.uniforms((d, hidden), -lim1, lim1),
            b1=np.zeros(hidden),
            w2=rng.uniforms((hidden, classes), -lim2, lim2),
            b2=np.zeros(classes),
        )

    def pool(self, docs: Sequence[np.ndarray], training: bool = True):
        """Mean token embedding per document; returns pooling context."""
        lengths = np.array([len(d) for d in docs], dtype=np.int64)
        flat = np.concatenate([d for d in docs if len(d)]) if lengths.sum() else \
            np.zeros(0, dtype=np.int64)
        doc_of_token = np.repeat(np.arange(len(docs)), lengths)
        emb = self.embedding.forward(flat, training=training)
        pooled = np.zeros((len(docs), self.embedding.d))
        np.add.at(pooled, doc_of_token, emb)
        pooled /= np.maximum(lengths, 1)[:, None]
        return pooled, (lengths, doc_of_token)

    def logits(self, pooled: np.ndarray):
        z1 = pooled @ self.w1 + self.b1
        a1 = np.maximum(z1, 0.0)
        return a1 @ self.w2 + self.b2, (z1, a1)

    def predict(self, docs: Sequence[np.ndarray], chunk: int = 2048) -> np.ndarray:
        # decode once, then evaluation is plain table lookups
        table = self.embedding.inference_table()
        out = np.empty(len(docs), dtype=np.int64)
        for lo in range(0, len(docs), chunk):
            part = docs[lo:lo + chunk]
            lengths = np.array([len(d) for d in part], dtype=np.int64)
            total = int(lengths.sum())
            flat = (np.concatenate([d for d in part if len(d)])
                    if total else np.zeros(0, dtype=np.int64))
            pooled = np.zeros((len(part), self.embedding.d))
            np.add.at(pooled, np.repeat(np.arange(len(part)), lengths), table[flat])
            pooled /= np.maximum(lengths, 1)[:, None]
            scores, _ = self.logits(pooled)
            out[lo:lo + chunk] = scores.argmax(axis=1)
        return out

    def accuracy(self, data: TextDataset) -> float:
        return float((self.predict(data.docs) == data.labels).mean())


def train_classifier(data: TextDataset, model: ClassifierModel,
                     opt: SgdOptions, heldout_fraction: float = 0.2,
                     on_epoch=None) -> TrainReport:
    """Cross-entropy training with gradients flowing into the embedding.

    Splits 80/20 by seeded shuffle, trains on the first part and reports
    train plus held-out accuracy per epoch.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if data.num_classes < 2:
        raise ValueError("classification needs at least 2 classes")
    class_counts = np.bincount(data.labels, minlength=data.num_classes)
    if (class_counts == 0).any():
        raise ValueError(
            f"classes without examples: {np.where(class_counts == 0)[0].tolist()}"
        )
    train, heldout = split_dataset(data, heldout_fraction, opt.seed)
    rng = Rng(opt.seed + 1)
    sgd = _Sgd(opt.lr, opt.momentum)
    quantized = isinstance(model.embedding, QuantizedEmbedding)
    columns = ["epoch", "loss", "train_acc", "heldout_acc"]
    if quantized:
        columns += ["reg_loss", "code_change"]
    report = TrainReport(
        columns=columns,
        compression=model.embedding.compression(),
    )
    started = time.perf_counter()
    prev_codes = model.embedding.codebook() if quantized else None
    order = np.arange(len(train))
    classes = data.num_classes
    for epoch in range(opt.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        epoch_reg = 0.0
        n_batches = 0
        for lo in range(0, len(order), opt.batch_size):
            idx = order[lo:lo + opt.batch_size]
            docs = [train.docs[i] for i in idx]
            labels = train.labels[idx]
            pooled, (lengths, doc_of_token) = model.pool(docs, training=True)
            scores, (z1, a1) = model.logits(pooled)
            if not np.all(np.isfinite(scores)):
                raise TrainingDivergedError(
                    f"classifier logits became non-finite at epoch {epoch}", epoch
                )
            probs = softmax_rows(scores)
            b = len(idx)
            loss = float(-np.log(probs[np.arange(b), labels] + 1e-300).mean())
            _check_finite(loss, epoch, "classifier loss")
            d_scores = probs.copy()
            d_scores[np.arange(b), labels] -= 1.0
            d_scores /= b
            d_w2 = a1.T @ d_scores
            d_b2 = d_scores.sum(axis=0)
            d_a1 = d_scores @ model.w2.T
            d_z1 = d_a1 * (z1 > 0)
            d_w1 = pooled.T @ d_z1
            d_b1 = d_z1.sum(axis=0)
            d_pooled = d_z1 @ model.w1.T
            per_token = d_pooled / np.maximum(lengths, 1)[:, None]
            model.embedding.backward(per_token[doc_of_token])
            sgd.step(model.w2, d_w2)
            sgd.step(model.b2, d_b2)
            sgd.step(model.w1, d_w1)
            sgd.step(model.b1, d_b1)
            model.embedding.step(sgd)
            epoch_loss += loss
            epoch_reg += model.embedding.reg_loss
            n_batches += 1
        row = dict(
            epoch=epoch,
            loss=epoch_loss / max(n_batches, 1),
            train_acc=model.accuracy(train),
            heldout_acc=model.accuracy(heldout),
        )
        if quantized:
            codes = model.embedding.codebook()
            row["reg_loss"] = epoch_reg / max(n_batches, 1)
            row["code_change"] = float((codes.codes != prev_codes.codes).mean())
            prev_codes = codes
        report.append(**row)
        if on_epoch is not None:
            on_epoch(epoch, model.embedding.state if quantized else None)
    report.wall_time_s = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# oracles

@dataclass
class KmeansResult:
    centroids: np.ndarray     # (d_groups, k, s)
    assignments: np.ndarray   # (n, d_groups)
    mse: float
    history: List[float]


def kmeans_oracle(target, k: int, d_groups: int, iters: int = 50,
                  seed: int = 0) -> KmeansResult:
    """Independent per-subspace Lloyd clustering of a table.

    Centroids start from seeded distinct data rows. An empty cluster is
    re-seeded to the point farthest from its assigned centroid. The
    reported mse is sum of squared residuals over all entries divided by
    n*d, matching the reconstruction metric.
    """
    x = np.asarray(target, dtype=np.float64)
    n, d = x.shape
    if d % d_groups != 0:
        raise ValueError(f"d_groups={d_groups} must divide d={d}")
    s = d // d_groups
    rng = Rng(seed)
    centroids = np.empty((d_groups, k, s))
    assigns = np.empty((n, d_groups), dtype=np.int64)
    sq_err_per_iter = np.zeros(iters)
    for j in range(d_groups):
        data = x[:, j * s:(j + 1) * s]
        cent = data[rng.sample(n, k)].copy()
        assign = None
        for it in range(iters):
            d2 = ((data[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
            assign = d2.argmin(axis=1)
            present = np.bincount(assign, minlength=k)
            if (present == 0).any():
                # farthest points take over the empty clusters
                residual = d2[np.arange(n), assign].copy()
                for empty in np.where(present == 0)[0]:
                    far = int(residual.argmax())
                    cent[empty] = data[far]
                    residual[far] = -1.0
                d2 = ((data[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
                assign = d2.argmin(axis=1)
            sq_err_per_iter[it] += float(d2[np.arange(n), assign].sum())
            for c in range(k):
                members = assign == c
                if members.any():
                    cent[c] = data[members].mean(axis=0)
        centroids[j] = cent
        assigns[:, j] = assign
    # final objective with the last centroid update applied
    final = 0.0
    for j in range(d_groups):
        data = x[:, j * s:(j + 1) * s]
        d2 = ((data[:, None, :] - centroids[j][None, :, :]) ** 2).sum(axis=2)
        assigns[:, j] = d2.argmin(axis=1)
        final += float(d2[np.arange(n), assigns[:, j]].sum())
    history = [v / (n * d) for v in sq_err_per_iter] + [final / (n * d)]
    return KmeansResult(
        centroids=centroids,
        assignments=assigns,
        mse=final / (n * d),
        history=history,
    )


@dataclass
class GradCheckReport:
    max_rel_err_sx: Optional[float] = None
    vq_identity_ok: Optional[bool] = None
    reg_grad_rel_err: Optional[float] = None


def _fd(loss_fn, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences over an arbitrary-shape array."""
    shape = arr.shape
    flat = arr.reshape(-1, 1).copy()

    def f(m):
        return loss_fn(m.reshape(shape))

    return central_diff_grad(f, flat, h).reshape(shape)


def _rel_err(pairs) -> float:
    """max|a - f| over all parameter blocks, relative to the gradient scale.

    The scale is the max-norm over every analytic and numeric entry, so
    one comparison covers the whole gradient: a sign or factor error on
    any entry that matters shows up at O(1), while blocks whose true
    gradients sit below the oracle's resolution (roundoff of the loss
    divided by 2h) cannot dominate the measure.
    """
    diff = 0.0
    scale = 0.0
    for analytic, numeric in pairs:
        diff = max(diff, float(np.abs(analytic - numeric).max(initial=0.0)))
        scale = max(scale, float(np.abs(analytic).max(initial=0.0)),
                    float(np.abs(numeric).max(initial=0.0)))
    return diff / max(scale, 1e-10)


def grad_check(cfg: DpqConfig, seed: int, h: float = 1e-6) -> GradCheckReport:
    """Compare every analytic gradient against central differences.

    For sx the checked function is the squared error of the tempered soft
    output against a fixed random table, differentiated in query, key,
    value and (when present) affine-normalization parameters. For vq the
    straight-through identity is checked bitwise and the pull-to-members
    gradient of the value blocks is checked numerically.
    """
    n_params = cfg.n * cfg.d + 2 * cfg.group_count * cfg.k * cfg.subspace_dim
    if n_params > 10_000:
        raise ValueError(f"{n_params} parameters exceed the oracle budget of 10k")
    rng = Rng(seed)
    state = init_state(cfg, rng)
    # Sample the check point away from degenerate regions (zero-norm
    # segments, near-constant score columns) so the h=1e-6 oracle is not
    # dominated by its own truncation error.
    state.query = rng.uniforms((cfg.n, cfg.d), -1.0, 1.0)
    kv_shape = state.key_blocks.shape
    sign = np.where(rng.uniforms(kv_shape) < 0.5, -1.0, 1.0)
    state.key_blocks[:] = sign * rng.uniforms(kv_shape, 0.5, 1.5)
    if not state.tied:
        sign = np.where(rng.uniforms(kv_shape) < 0.5, -1.0, 1.0)
        state.value_blocks[:] = sign * rng.uniforms(kv_shape, 0.5, 1.5)
    batch = np.arange(cfg.n)
    y = rng.uniforms((cfg.n, cfg.d), -1.0, 1.0)
    report = GradCheckReport()

    def clone_with(query=None, key=None, value=None, gamma=None, beta=None):
        st = init_state(cfg, Rng(0))
        st.query = state.query if query is None else query
        st.key_blocks = state.key_blocks if key is None else key
        if cfg.tied:
            st.value_blocks = st.key_blocks
        else:
            st.value_blocks = state.value_blocks if value is None else value
        if st.bn is not None and state.bn is not None:
            st.bn.gamma = (state.bn.gamma if gamma is None else gamma)
            st.bn.beta = (state.bn.beta if beta is None else beta)
        return st

    if cfg.mode == "sx":
        def soft_loss(**kwargs):
            st = clone_with(**kwargs)
            trace = sx_forward(st, cfg, batch, training=True, update_running=False)
            return 0.5 * float(((autograd.soft_emission(trace) - y) ** 2).sum())

        trace = sx_forward(state, cfg, batch, training=True, update_running=False)
        upstream = autograd.soft_emission(trace) - y
        bundle = sx_backward(trace, upstream)
        pairs = [
            (bundle.d_query, _fd(lambda a: soft_loss(query=a), state.query, h)),
            (bundle.d_key, _fd(lambda a: soft_loss(key=a), state.key_blocks, h)),
            (bundle.d_value, _fd(lambda a: soft_loss(value=a), state.value_blocks, h)),
        ]
        if cfg.bn and cfg.bn_affine:
            pairs.append((bundle.d_gamma,
                          _fd(lambda a: soft_loss(gamma=a), state.bn.gamma, h)))
            pairs.append((bundle.d_beta,
                          _fd(lambda a: soft_loss(beta=a), state.bn.beta, h)))
        report.max_rel_err_sx = _rel_err(pairs)
    else:
        trace = vq_forward(state, cfg, batch, training=True, update_running=False)
        upstream = rng.uniforms((cfg.n, cfg.d), -1.0, 1.0)
        bundle = vq_backward(trace, upstream)
        report.vq_identity_ok = bool(
            np.array_equal(bundle.d_query[batch], upstream)
        )
        if cfg.reg_coefficient > 0:
            def reg_loss(blocks):
                st = clone_with(key=blocks)
                tr = vq_forward(st, cfg, batch, training=True, update_running=False)
                e3 = tr.emitted - st.query[batch]
                return cfg.reg_coefficient * float((e3 ** 2).sum())

            numeric = _fd(reg_loss, state.key_blocks, h)
            report.reg_grad_rel_err = _rel_err([(bundle.d_value, numeric)])
    return report
