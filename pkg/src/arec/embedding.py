"""Per-field embedding layer.

Each categorical field owns a lookup table, multi-valued fields average the
rows of their active categories, and continuous fields scale one learned
vector by the normalized value.  All fields share the same output dimension
so the crossing layer downstream can multiply rows elementwise.

Two access paths exist: the per-example functions that the contracts and
gradient checks exercise, and columnar batch functions used by the trainer.
Both accumulate in the same order, so they agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CATEGORICAL, CONTINUOUS, MULTI_CATEGORICAL, EncodingError, FeatureSchema
from .numerics import Rng, Tensor

# Normal(0, 0.01): read as variance, i.e. std 0.1.
INIT_STD = 0.1


@dataclass
class EmbeddingParams:
    """One table per schema field: (N_i, d) for categorical kinds, (d,) for continuous."""

    dim: int
    tables: list

    @property
    def n_fields(self) -> int:
        return len(self.tables)

    def named_tensors(self):
        for i, table in enumerate(self.tables):
            yield f"emb.f{i}", table


def init_embedding(schema: FeatureSchema, dim: int, rng: Rng) -> EmbeddingParams:
    tables = []
    for spec in schema.fields:
        if spec.kind == CONTINUOUS:
            tables.append(rng.normal((dim,), std=INIT_STD))
        else:
            tables.append(rng.normal((spec.cardinality, dim), std=INIT_STD))
    return EmbeddingParams(dim=dim, tables=tables)


def zeros_like_embedding(params: EmbeddingParams) -> EmbeddingParams:
    return EmbeddingParams(dim=params.dim, tables=[np.zeros_like(t) for t in params.tables])


def _check_index(idx, table, field) -> int:
    idx = int(idx)
    if not 0 <= idx < table.shape[0]:
        raise EncodingError(f"field {field}: index {idx} outside [0, {table.shape[0]})")
    return idx


def embed(example, params: EmbeddingParams) -> Tensor:
    """Dense (n_fields, d) representation of one encoded example."""
    rows = np.empty((params.n_fields, params.dim), dtype=np.float64)
    for i, payload in enumerate(example.values):
        table = params.tables[i]
        if isinstance(payload, tuple):
            idx = [_check_index(j, table, i) for j in payload]
            rows[i] = table[idx].sum(axis=0) / len(idx)
        elif isinstance(payload, (int, np.integer)):
            rows[i] = table[_check_index(payload, table, i)]
        else:
            rows[i] = float(payload) * table
    return rows


def embed_backward(example, params: EmbeddingParams, upstream: Tensor):
    """Sparse gradients of embed() w.r.t. the touched parameter rows.

    Returns one entry per field: {row_index: (d,) grad} for categorical
    kinds, a (d,) vector for continuous fields.  Rows that were not active
    do not appear at all.
    """
    if upstream.shape != (params.n_fields, params.dim):
        raise EncodingError(
            f"upstream shape {upstream.shape} != ({params.n_fields}, {params.dim})"
        )
    grads = []
    for i, payload in enumerate(example.values):
        if isinstance(payload, tuple):
            share = upstream[i] / len(payload)
            rows = {}
            for j in payload:
                rows[int(j)] = rows.get(int(j), 0.0) + share
            grads.append(rows)
        elif isinstance(payload, (int, np.integer)):
            grads.append({int(payload): upstream[i].copy()})
        else:
            grads.append(float(payload) * upstream[i])
    return grads


def densify_embedding_grads(sparse_grads, params: EmbeddingParams) -> EmbeddingParams:
    """Scatter sparse per-row gradients into zero-filled full tables."""
    dense = zeros_like_embedding(params)
    for i, g in enumerate(sparse_grads):
        if isinstance(g, dict):
            for row, vec in g.items():
                dense.tables[i][row] += vec
        else:
            dense.tables[i] += g
    return dense


# ---------------------------------------------------------------------------
# columnar batch path


@dataclass
class FieldColumn:
    kind: str
    idx: np.ndarray = None        # (B,) int64, categorical
    padded: np.ndarray = None     # (B, qmax) int64, multi-categorical, 0-padded
    counts: np.ndarray = None     # (B,) int64
    vals: np.ndarray = None       # (B,) float64, continuous


@dataclass
class Columnar:
    """Column-major view of a list of encoded examples."""

    fields: list
    labels: np.ndarray
    n: int

    @staticmethod
    def from_examples(examples, schema: FeatureSchema) -> "Columnar":
        n = len(examples)
        cols = []
        for i, spec in enumerate(schema.fields):
            if spec.kind == CATEGORICAL:
                cols.append(
                    FieldColumn(
                        kind=spec.kind,
                        idx=np.fromiter(
                            (ex.values[i] for ex in examples), dtype=np.int64, count=n
                        ),
                    )
                )
            elif spec.kind == MULTI_CATEGORICAL:
                counts = np.fromiter(
                    (len(ex.values[i]) for ex in examples), dtype=np.int64, count=n
                )
                qmax = int(counts.max()) if n else 1
                padded = np.zeros((n, qmax), dtype=np.int64)
                for b, ex in enumerate(examples):
                    active = ex.values[i]
                    padded[b, : len(active)] = active
                cols.append(FieldColumn(kind=spec.kind, padded=padded, counts=counts))
            else:
                cols.append(
                    FieldColumn(
                        kind=spec.kind,
                        vals=np.fromiter(
                            (ex.values[i] for ex in examples), dtype=np.float64, count=n
                        ),
                    )
                )
        labels = np.fromiter((ex.label for ex in examples), dtype=np.float64, count=n)
        return Columnar(fields=cols, labels=labels, n=n)

    def take(self, indices) -> "Columnar":
        """Row subset in the given order (a mini-batch)."""
        out = []
        for col in self.fields:
            if col.kind == CATEGORICAL:
                out.append(FieldColumn(kind=col.kind, idx=col.idx[indices]))
            elif col.kind == MULTI_CATEGORICAL:
                out.append(
                    FieldColumn(
                        kind=col.kind,
                        padded=col.padded[indices],
                        counts=col.counts[indices],
                    )
                )
            else:
                out.append(FieldColumn(kind=col.kind, vals=col.vals[indices]))
        return Columnar(fields=out, labels=self.labels[indices], n=len(self.labels[indices]))


def embed_batch(col: Columnar, params: EmbeddingParams) -> Tensor:
    """(B, n_fields, d) embeddings for a columnar batch."""
    B = col.n
    out = np.empty((B, params.n_fields, params.dim), dtype=np.float64)
    for i, fc in enumerate(col.fields):
        table = params.tables[i]
        if fc.kind == CATEGORICAL:
            out[:, i, :] = table[fc.idx]
        elif fc.kind == MULTI_CATEGORICAL:
            gathered = table[fc.padded]  # (B, qmax, d)
            mask = (np.arange(fc.padded.shape[1]) < fc.counts[:, None])[:, :, None]
            out[:, i, :] = np.sum(gathered * mask, axis=1) / fc.counts[:, None]
        else:
            out[:, i, :] = fc.vals[:, None] * table[None, :]
    return out


def embed_batch_backward(col: Columnar, params: EmbeddingParams, upstream: Tensor) -> EmbeddingParams:
    """Dense gradient tables for a batch; untouched rows stay exactly zero."""
    grads = zeros_like_embedding(params)
    for i, fc in enumerate(col.fields):
        g = upstream[:, i, :]  # (B, d)
        if fc.kind == CATEGORICAL:
            np.add.at(grads.tables[i], fc.idx, g)
        elif fc.kind == MULTI_CATEGORICAL:
            qmax = fc.padded.shape[1]
            share = g / fc.counts[:, None]  # (B, d)
            mask = (np.arange(qmax) < fc.counts[:, None])[:, :, None]
            contrib = share[:, None, :] * mask  # (B, qmax, d); padding rows add 0
            np.add.at(grads.tables[i], fc.padded.ravel(), contrib.reshape(-1, params.dim))
        else:
            grads.tables[i] += np.einsum("b,bd->d", fc.vals, g, optimize=False)
    return grads
