"""Deterministic numeric kernels everything else builds on.

Dense matrices are plain float64 ``np.ndarray``s validated through
:func:`as_matrix`; non-finite entries are rejected at the boundary so the
math below never has to re-check. The seeded generator is SplitMix64, a
published 64-bit mix whose stream is reproducible anywhere from the seed
alone.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import OracleFailureError

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with finite entries."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def softmax_rows(m, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / temperature`` with max-subtraction.

    Each output row sums to 1 within 1e-12 even for logits around +-700.
    """
    if not (temperature > 0):
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = as_matrix(m) / temperature
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def matrix_rank(m, tol: float = 1e-9) -> int:
    """Numerical rank by row elimination with partial pivoting.

    A pivot smaller than ``tol`` times the largest absolute entry of the
    input counts as zero.
    """
    if not (tol > 0):
        raise ValueError(f"tol must be positive, got {tol}")
    a = as_matrix(m).copy()
    rows, cols = a.shape
    scale = np.abs(a).max(initial=0.0)
    if scale == 0.0:
        return 0
    cutoff = tol * scale
    rank = 0
    row = 0
    for col in range(cols):
        if row >= rows:
            break
        pivot = row + int(np.argmax(np.abs(a[row:, col])))
        if abs(a[pivot, col]) <= cutoff:
            continue
        if pivot != row:
            a[[row, pivot]] = a[[pivot, row]]
        factors = a[row + 1:, col] / a[row, col]
        a[row + 1:] -= np.outer(factors, a[row])
        rank += 1
        row += 1
    return rank


def central_diff_grad(f: Callable[[np.ndarray], float], at, h: float) -> np.ndarray:
    """Entrywise central-difference gradient (f(x+h*e) - f(x-h*e)) / 2h.

    The scalar function ``f`` is evaluated 2*size times; any non-finite
    value raises :class:`OracleFailureError`.
    """
    if not (h > 0):
        raise ValueError(f"h must be positive, got {h}")
    x = as_matrix(at).copy()
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(
                f"non-finite evaluation at index {idx}: f+={fp}, f-={fm}"
            )
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


class Rng:
    """SplitMix64 pseudo-random generator.

    State advances by the 64-bit golden-ratio constant each draw and the
    output is the standard two-round xor-multiply mix, so a given seed
    yields the same stream in any implementation of the algorithm. One
    instance per thread; instances share nothing.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._state = self.seed

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def _bulk_u64(self, count: int) -> np.ndarray:
        # Vectorized: state_i = s0 + i*golden, then the mix, all mod 2^64.
        with np.errstate(over="ignore"):
            steps = np.arange(1, count + 1, dtype=np.uint64)
            z = np.uint64(self._state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + count * _GOLDEN) & _MASK64
        return z

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """One double in [low, high) from the top 53 bits of a draw."""
        u = (self.next_u64() >> 11) * 2.0 ** -53
        return low + (high - low) * u

    def uniforms(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        count = int(np.prod(shape))
        u = (self._bulk_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return (low + (high - low) * u).reshape(shape)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def integers(self, n: int, size: int) -> np.ndarray:
        """``size`` unbiased integers in [0, n)."""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            draw = self._bulk_u64(size - filled)
            keep = draw < np.uint64(limit)
            kept = draw[keep]
            out[filled:filled + kept.size] = (kept % np.uint64(n)).astype(np.int64)
            filled += kept.size
        return out

    def shuffle(self, values: np.ndarray) -> None:
        """In-place Fisher-Yates shuffle along the first axis."""
        for i in range(len(values) - 1, 0, -1):
            j = self.below(i + 1)
            values[[i, j]] = values[[j, i]]

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order random."""
        if k > n:
            raise ValueError(f"cannot sample {k} distinct values from {n}")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.below(n - i)
            pool[[i, j]] = pool[[j, i]]
        return pool[:k].copy()
