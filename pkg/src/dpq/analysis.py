"""Read-only studies of trained codebooks and decoded embeddings.

Covers code-usage histograms, the fraction of codes that changed between
two checkpoints, cosine nearest neighbors in the decoded table, and a
plain TSV export of per-token codes. Rendering is left to external
tools; everything here emits arrays or TSV rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Codebook
from .numerics import as_matrix


def code_distribution(codebook: Codebook) -> np.ndarray:
    """(d_groups, k) usage counts; each group's counts sum to n."""
    counts = np.zeros((codebook.d_groups, codebook.k), dtype=np.int64)
    for j in range(codebook.d_groups):
        counts[j] = np.bincount(codebook.codes[:, j], minlength=codebook.k)
    return counts


@dataclass
class CheckpointDelta:
    """How many code positions differ between two codebooks."""

    changed: int
    total: int
    step_a: Optional[int] = None
    step_b: Optional[int] = None

    @property
    def fraction(self) -> float:
        return self.changed / self.total


def code_change_rate(a: Codebook, b: Codebook,
                     step_a: Optional[int] = None,
                     step_b: Optional[int] = None) -> CheckpointDelta:
    """Fraction of the n x d_groups code positions that differ."""
    if a.codes.shape != b.codes.shape:
        raise ValueError(
            f"codebook shapes differ: {a.codes.shape} vs {b.codes.shape}"
        )
    changed = int((a.codes != b.codes).sum())
    return CheckpointDelta(changed=changed, total=a.codes.size,
                           step_a=step_a, step_b=step_b)


@dataclass
class NeighborReport:
    """Ranked cosine neighbors of one token."""

    query: int
    entries: List[Tuple[int, float]]   # (token id, similarity), rank order
    zero_norm_excluded: int = 0


def nearest_neighbors(table, query_id: int, top: int) -> NeighborReport:
    """Top neighbors of a token by cosine similarity of embedding rows.

    The query itself is listed first with similarity exactly 1.0;
    remaining entries sort by descending similarity with ties broken by
    token id. Rows with zero norm cannot be ranked and are only counted.
    """
    h = as_matrix(table, "embedding table")
    n = h.shape[0]
    if not (0 <= query_id < n):
        raise ValueError(f"query id {query_id} out of range for n={n}")
    if not (0 < top <= n):
        raise ValueError(f"top must be in [1,{n}], got {top}")
    norms = np.linalg.norm(h, axis=1)
    if norms[query_id] == 0.0:
        raise ValueError(f"query row {query_id} has zero norm")
    valid = norms != 0.0
    sims = np.zeros(n)
    sims[valid] = (h[valid] @ h[query_id]) / (norms[valid] * norms[query_id])
    # Bitwise duplicates of the query are exact matches by definition.
    dup = valid & np.all(h == h[query_id], axis=1)
    sims[dup] = 1.0
    order = [i for i in range(n) if valid[i] and i != query_id]
    order.sort(key=lambda i: (-sims[i], i))
    entries = [(query_id, 1.0)] + [(i, float(sims[i])) for i in order[: top - 1]]
    return NeighborReport(
        query=query_id,
        entries=entries,
        zero_norm_excluded=int((~valid).sum()),
    )


def export_code_table(codebook: Codebook, tokens: Sequence[str],
                      ids: Sequence[int]) -> List[str]:
    """TSV rows (header first): token string followed by its codes."""
    header = "token\t" + "\t".join(f"c{j}" for j in range(codebook.d_groups))
    rows = [header]
    for i in ids:
        if not (0 <= i < codebook.n) or i >= len(tokens):
            raise ValueError(f"unknown token id {i}")
        codes = "\t".join(str(c) for c in codebook.codes[i])
        rows.append(f"{tokens[i]}\t{codes}")
    return rows


def histogram_tsv(counts: np.ndarray) -> List[str]:
    """One row per group, k tab-separated counts."""
    return ["\t".join(str(int(c)) for c in row) for row in counts]


def delta_series_tsv(deltas: Sequence[CheckpointDelta]) -> List[str]:
    """Header plus (step, fraction) rows for a checkpoint sequence."""
    rows = ["step\tfraction_changed"]
    for d in deltas:
        step = d.step_b if d.step_b is not None else ""
        rows.append(f"{step}\t{d.fraction:.6f}")
    return rows


def neighbors_tsv(report: NeighborReport, tokens: Sequence[str]) -> List[str]:
    """Header plus (token, similarity) rows, rank order."""
    rows = ["token\tcosine"]
    for token_id, sim in report.entries:
        name = tokens[token_id] if token_id < len(tokens) else str(token_id)
        rows.append(f"{name}\t{sim:.3f}")
    return rows
