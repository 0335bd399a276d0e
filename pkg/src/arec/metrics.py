"""Ranking and likelihood metrics.

AUC is computed by the rank formulation: sum the average ranks of the
positive examples and normalize by the number of positive/negative pairs.
Ties share their average rank, which makes the result identical to the
pairwise comparator that counts ties as one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DomainError
from .embedding import Columnar
from .losses import logloss

EVAL_CSV_HEADER = "tag,auc,logloss,n_pos,n_neg"

# scoring chunk for evaluation; bounds the (B, n, n) attention buffers
_EVAL_CHUNK = 4096


class MetricUndefinedError(ValueError):
    """Raised when a metric has no defined value, e.g. AUC on one class."""


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise DomainError(f"auc needs matching 1-d inputs, got {s.shape} and {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DomainError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(s, kind="mergesort")
    _, inverse, counts = np.unique(s[order], return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    avg_rank = (starts + ends) / 2.0
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = avg_rank[inverse]
    pos_rank_sum = float(ranks[y == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n_pos: int
    n_neg: int
    tag: str = ""

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "auc": self.auc,
            "logloss": self.logloss,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }

    def csv_row(self) -> str:
        return f"{self.tag},{self.auc!r},{self.logloss!r},{self.n_pos},{self.n_neg}"


def score_split(ops, params, examples, schema) -> np.ndarray:
    """Predicted probabilities for a list of encoded examples, chunked."""
    col = Columnar.from_examples(examples, schema)
    out = np.empty(col.n, dtype=np.float64)
    for lo in range(0, col.n, _EVAL_CHUNK):
        chunk = col.take(np.arange(lo, min(lo + _EVAL_CHUNK, col.n)))
        probs, _, _ = ops.forward_batch(chunk, params)
        out[lo : lo + len(probs)] = probs
    return out


def evaluate(ops, params, examples, schema, tag: str = "") -> EvalReport:
    if len(examples) == 0:
        raise DomainError("cannot evaluate an empty split")
    scores = score_split(ops, params, examples, schema)
    labels = np.array([ex.label for ex in examples], dtype=np.float64)
    n_pos = int(labels.sum())
    return EvalReport(
        auc=auc(scores, labels),
        logloss=logloss(scores, labels),
        n_pos=n_pos,
        n_neg=labels.size - n_pos,
        tag=tag,
    )
