"""Episode losses: query cross-entropy and inter-class orthogonality.

The orthogonality term pushes support features of different classes
toward mutually orthogonal directions: with each pool row-normalized to
the unit sphere, it sums ||S_i S_j^T||_F^2 over ordered class pairs
(i != j) and downscales by a fixed factor (0.03 by default).
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .head import ClassScores, SupportPool

_zero_row_lock = threading.Lock()
_zero_row_count = 0


def zero_row_warning_count() -> int:
    """How many zero-norm feature rows have been normalized to zero so far."""
    return _zero_row_count


def _count_zero_rows(n: int):
    global _zero_row_count
    with _zero_row_lock:
        _zero_row_count += n


def row_normalize(x: np.ndarray) -> tuple[np.ndarray, int]:
    """Project each row onto the unit sphere; zero rows map to zero.

    Returns the normalized matrix and the number of degenerate rows.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    n_zero = int(zero.sum())
    safe = np.where(norms == 0.0, 1.0, norms)
    out = x / safe
    if n_zero:
        out[zero] = 0.0
    return out, n_zero


@dataclass(frozen=True)
class LossValue:
    """A scalar loss with its additive breakdown by term name."""

    value: float
    breakdown: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        total = sum(self.breakdown.values())
        if self.breakdown and abs(total - self.value) > 1e-9:
            raise ValueError(f"breakdown sums to {total}, value is {self.value}")

    @classmethod
    def single(cls, name: str, value: float) -> "LossValue":
        return cls(value=value, breakdown={name: value})


def total_loss(*terms: LossValue) -> LossValue:
    """Sum of loss terms with merged breakdowns."""
    breakdown: dict[str, float] = {}
    for t in terms:
        for name, v in t.breakdown.items():
            breakdown[name] = breakdown.get(name, 0.0) + v
    return LossValue(value=sum(breakdown.values()), breakdown=breakdown)


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood, computed from logits via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (queries, classes), got shape {logits.shape}")
    n_q, n_c = logits.shape
    if labels.shape != (n_q,):
        raise ValueError(f"labels shape {labels.shape} does not match {n_q} queries")
    if labels.min() < 0 or labels.max() >= n_c:
        raise ValueError(f"labels must lie in [0, {n_c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(n_q), labels]))


def cross_entropy(scores_per_query: Sequence[ClassScores], true_labels) -> LossValue:
    """Mean cross-entropy over queries, from each query's logits."""
    if not scores_per_query:
        raise ValueError("at least one query score is required")
    logits = np.vstack([s.logits for s in scores_per_query])
    value = cross_entropy_from_logits(logits, np.asarray(true_labels))
    return LossValue.single("cross_entropy", value)


def aux_orthogonality(pools: Sequence[SupportPool], scale: float = 0.03) -> LossValue:
    """Downscaled sum of squared cross-class row-cosine Gram norms.

    Each pool is row-normalized; the sum runs over ordered pairs, so each
    unordered class pair contributes twice. Zero-norm rows are normalized
    to zero and counted via the module warning counter.
    """
    normalized = []
    n_zero = 0
    for pool in pools:
        vals = pool.values if isinstance(pool, SupportPool) else np.asarray(pool)
        hat, z = row_normalize(vals)
        normalized.append(hat)
        n_zero += z
    if n_zero:
        _count_zero_rows(n_zero)
        warnings.warn(
            f"{n_zero} zero-norm feature rows normalized to zero", RuntimeWarning
        )
    value = 0.0
    for i, si in enumerate(normalized):
        for j, sj in enumerate(normalized):
            if i == j:
                continue
            cross = si @ sj.T
            value += float(np.sum(cross * cross))
    return LossValue.single("aux_orthogonality", scale * value)
