"""Predictor assembly: embeddings, both representation branches, and a deep
MLP combined into one logit, plus FM and DeepFM baselines sharing the same
data pipeline and embedding machinery.

Every model kind exposes the same surface: per-example predict with an
exact logloss backward, and columnar batch forward/backward for the
trainer.  Gradient containers reuse the parameter dataclasses so optimizer
code can walk (name, tensor) pairs without caring which model it updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import EncodingError, FeatureSchema
from .embedding import (
    Columnar,
    EmbeddingParams,
    densify_embedding_grads,
    embed,
    embed_backward,
    embed_batch,
    embed_batch_backward,
    init_embedding,
    zeros_like_embedding,
)
from .interaction import (
    AcParams,
    MhsaParams,
    branch_backward,
    branches_forward,
    branches_forward_batch,
    branches_backward_batch,
    init_ac,
    init_mhsa,
    zeros_like_ac,
    zeros_like_mhsa,
)
from .losses import PROB_FLOOR
from .numerics import Rng, Tensor, relu

MODES = ("shallow", "deep", "combined")


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _logit_grad(prob: float, label: float) -> float:
    # d(logloss)/d(logit) for one example; zero once the prob clamp engages.
    if not PROB_FLOOR < prob < 1.0 - PROB_FLOOR:
        return 0.0
    return prob - label


# ---------------------------------------------------------------------------
# deep MLP


@dataclass
class DeepParams:
    """Fully connected stack; hidden layers ReLU, final layer linear scalar."""

    layers: list  # [(w (out, in), b (out,)), ...]

    def named_tensors(self):
        for l, (w, b) in enumerate(self.layers):
            yield f"deep.w{l}", w
            yield f"deep.b{l}", b


def init_deep(in_dim: int, hidden, rng: Rng) -> DeepParams:
    widths = [in_dim, *hidden, 1]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal((fan_out, fan_in), std=math.sqrt(2.0 / (fan_in + fan_out)))
        layers.append((w, np.zeros(fan_out)))
    return DeepParams(layers=layers)


def zeros_like_deep(p: DeepParams) -> DeepParams:
    return DeepParams(layers=[(np.zeros_like(w), np.zeros_like(b)) for w, b in p.layers])


@dataclass
class DeepTrace:
    inputs: list  # activation entering each layer
    pres: list  # pre-activation of each layer


def deep_forward(vec: Tensor, params: DeepParams):
    a = vec
    inputs, pres = [], []
    last = len(params.layers) - 1
    for l, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = np.einsum("oi,i->o", w, a, optimize=False) + b
        pres.append(z)
        a = z if l == last else relu(z)
    return float(a[0]), DeepTrace(inputs=inputs, pres=pres)


def deep_backward(trace: DeepTrace, params: DeepParams, d_logit: float):
    grads = zeros_like_deep(params)
    d = np.array([d_logit])
    last = len(params.layers) - 1
    for l in range(last, -1, -1):
        w, _ = params.layers[l]
        if l != last:
            d = d * (trace.pres[l] > 0)
        gw, gb = grads.layers[l]
        gw += np.einsum("o,i->oi", d, trace.inputs[l], optimize=False)
        gb += d
        d = np.einsum("o,oi->i", d, w, optimize=False)
    return grads, d


def deep_forward_batch(acts: Tensor, params: DeepParams):
    a = acts
    inputs, pres = [], []
    last = len(params.layers) - 1
    for l, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = np.einsum("bi,oi->bo", a, w, optimize=False) + b
        pres.append(z)
        a = z if l == last else relu(z)
    return a[:, 0], DeepTrace(inputs=inputs, pres=pres)


def deep_backward_batch(trace: DeepTrace, params: DeepParams, d_logits: Tensor):
    grads = zeros_like_deep(params)
    d = d_logits[:, None]
    last = len(params.layers) - 1
    for l in range(last, -1, -1):
        w, _ = params.layers[l]
        if l != last:
            d = d * (trace.pres[l] > 0)
        gw, gb = grads.layers[l]
        gw += np.einsum("bo,bi->oi", d, trace.inputs[l], optimize=False)
        gb += d.sum(axis=0)
        d = np.einsum("bo,oi->bi", d, w, optimize=False)
    return grads, d


# ---------------------------------------------------------------------------
# main two-branch model


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    mhsa: MhsaParams
    ac: AcParams
    w_internal: Tensor  # (n_fields * d,)
    w_cross: Tensor  # (d,)
    bias: Tensor  # (1,)
    deep: DeepParams  # None when mode == "shallow"
    first_order: EmbeddingParams  # optional linear term, None by default
    mode: str = "combined"

    def named_tensors(self):
        yield from self.embedding.named_tensors()
        yield from self.mhsa.named_tensors()
        yield from self.ac.named_tensors()
        if self.mode != "deep":
            yield "shallow.internal", self.w_internal
            yield "shallow.cross", self.w_cross
            yield "shallow.bias", self.bias
        if self.deep is not None:
            yield from self.deep.named_tensors()
        if self.first_order is not None:
            for i, t in enumerate(self.first_order.tables):
                yield f"fo.f{i}", t


def init_model(schema: FeatureSchema, dim: int, rng: Rng, *, heads: int = 2,
               ac_hidden: int = 32, deep_hidden=(64, 64), mode: str = "combined",
               first_order: bool = False, attn_dim: int = None) -> ModelParams:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n = schema.n_fields
    emb = init_embedding(schema, dim, rng)
    mhsa = init_mhsa(dim, heads, rng, attn_dim=attn_dim)
    ac = init_ac(dim, ac_hidden, rng)
    deep = None if mode == "shallow" else init_deep(n * dim + dim, deep_hidden, rng)
    fo = init_embedding(schema, 1, rng) if first_order else None
    return ModelParams(
        embedding=emb, mhsa=mhsa, ac=ac,
        w_internal=rng.normal((n * dim,), std=0.1),
        w_cross=rng.normal((dim,), std=0.1),
        bias=np.zeros(1),
        deep=deep, first_order=fo, mode=mode,
    )


def zeros_like_model(p: ModelParams) -> ModelParams:
    return ModelParams(
        embedding=zeros_like_embedding(p.embedding),
        mhsa=zeros_like_mhsa(p.mhsa),
        ac=zeros_like_ac(p.ac),
        w_internal=np.zeros_like(p.w_internal),
        w_cross=np.zeros_like(p.w_cross),
        bias=np.zeros_like(p.bias),
        deep=None if p.deep is None else zeros_like_deep(p.deep),
        first_order=None if p.first_order is None else zeros_like_embedding(p.first_order),
        mode=p.mode,
    )


@dataclass
class ModelTrace:
    example: object
    emb: Tensor
    branch: object
    internal: Tensor
    crossed: Tensor
    deep: DeepTrace
    fo_rows: Tensor


@dataclass
class Prediction:
    probability: float
    logit: float
    trace: object


def _check_example(example, n_fields: int):
    if len(example.values) != n_fields:
        raise EncodingError(
            f"example has {len(example.values)} fields, model expects {n_fields}"
        )


def predict(example, params: ModelParams) -> Prediction:
    _check_example(example, params.embedding.n_fields)
    emb = embed(example, params.embedding)
    out, btrace = branches_forward(emb, params.mhsa, params.ac)
    logit = 0.0
    if params.mode != "deep":
        logit += (
            float(np.einsum("i,i->", params.w_internal, out.internal, optimize=False))
            + float(np.einsum("i,i->", params.w_cross, out.crossed, optimize=False))
            + float(params.bias[0])
        )
    deep_trace = None
    if params.deep is not None:
        deep_logit, deep_trace = deep_forward(
            np.concatenate([out.internal, out.crossed]), params.deep
        )
        logit += deep_logit
    fo_rows = None
    if params.first_order is not None:
        fo_rows = embed(example, params.first_order)
        logit += float(fo_rows.sum())
    trace = ModelTrace(example=example, emb=emb, branch=btrace, internal=out.internal,
                       crossed=out.crossed, deep=deep_trace, fo_rows=fo_rows)
    return Prediction(probability=_sigmoid_scalar(logit), logit=logit, trace=trace)


def model_backward(pred: Prediction, label: float, params: ModelParams) -> ModelParams:
    """Exact gradient of per-example logloss over every parameter block."""
    tr: ModelTrace = pred.trace
    d = _logit_grad(pred.probability, float(label))
    grads = zeros_like_model(params)
    nd = tr.internal.shape[0]
    d_internal = np.zeros(nd)
    d_crossed = np.zeros_like(tr.crossed)
    if params.mode != "deep":
        grads.w_internal += d * tr.internal
        grads.w_cross += d * tr.crossed
        grads.bias += d
        d_internal += d * params.w_internal
        d_crossed += d * params.w_cross
    if params.deep is not None:
        dg, d_a0 = deep_backward(tr.deep, params.deep, d)
        grads.deep = dg
        d_internal += d_a0[:nd]
        d_crossed += d_a0[nd:]
    mg, ag, d_emb = branch_backward(tr.branch, params.mhsa, params.ac, d_internal, d_crossed)
    grads.mhsa = mg
    grads.ac = ag
    sparse = embed_backward(tr.example, params.embedding, d_emb)
    grads.embedding = densify_embedding_grads(sparse, params.embedding)
    if params.first_order is not None:
        ones = np.full((params.embedding.n_fields, 1), d)
        grads.first_order = densify_embedding_grads(
            embed_backward(tr.example, params.first_order, ones), params.first_order
        )
    return grads


@dataclass
class BatchTrace:
    col: Columnar
    emb: Tensor
    branch: object
    internal: Tensor  # (B, n*d)
    crossed: Tensor  # (B, d)
    deep: DeepTrace
    probs: Tensor


def forward_batch(col: Columnar, params: ModelParams):
    emb = embed_batch(col, params.embedding)
    B, n, dim = emb.shape
    btrace = branches_forward_batch(emb, params.mhsa, params.ac)
    internal = btrace.out.reshape(B, n * dim)
    crossed = btrace.pooled
    logits = np.zeros(B)
    if params.mode != "deep":
        logits += (
            np.einsum("bi,i->b", internal, params.w_internal, optimize=False)
            + np.einsum("bi,i->b", crossed, params.w_cross, optimize=False)
            + params.bias[0]
        )
    deep_trace = None
    if params.deep is not None:
        deep_logits, deep_trace = deep_forward_batch(
            np.concatenate([internal, crossed], axis=1), params.deep
        )
        logits += deep_logits
    if params.first_order is not None:
        logits += embed_batch(col, params.first_order).sum(axis=(1, 2))
    probs = 1.0 / (1.0 + np.exp(-np.abs(logits)))
    probs = np.where(logits >= 0, probs, 1.0 - probs)
    trace = BatchTrace(col=col, emb=emb, branch=btrace, internal=internal,
                       crossed=crossed, deep=deep_trace, probs=probs)
    return probs, logits, trace


def backward_batch(trace: BatchTrace, params: ModelParams, d_logits: Tensor) -> ModelParams:
    grads = zeros_like_model(params)
    B, n, dim = trace.emb.shape
    d_internal = np.zeros_like(trace.internal)
    d_crossed = np.zeros_like(trace.crossed)
    if params.mode != "deep":
        grads.w_internal += np.einsum("b,bi->i", d_logits, trace.internal, optimize=False)
        grads.w_cross += np.einsum("b,bi->i", d_logits, trace.crossed, optimize=False)
        grads.bias += d_logits.sum()
        d_internal += d_logits[:, None] * params.w_internal[None, :]
        d_crossed += d_logits[:, None] * params.w_cross[None, :]
    if params.deep is not None:
        dg, d_a0 = deep_backward_batch(trace.deep, params.deep, d_logits)
        grads.deep = dg
        d_internal += d_a0[:, : n * dim]
        d_crossed += d_a0[:, n * dim :]
    mg, ag, d_emb = branches_backward_batch(
        trace.branch, params.mhsa, params.ac, d_internal, d_crossed
    )
    grads.mhsa = mg
    grads.ac = ag
    grads.embedding = embed_batch_backward(trace.col, params.embedding, d_emb)
    if params.first_order is not None:
        up = np.broadcast_to(d_logits[:, None, None], (B, n, 1))
        grads.first_order = embed_batch_backward(trace.col, params.first_order, up)
    return grads


# ---------------------------------------------------------------------------
# FM baseline


@dataclass
class FmParams:
    bias: Tensor  # (1,)
    first_order: EmbeddingParams  # dim 1
    factors: EmbeddingParams  # dim d

    def named_tensors(self):
        yield "fm.bias", self.bias
        for i, t in enumerate(self.first_order.tables):
            yield f"fm.w.f{i}", t
        for i, t in enumerate(self.factors.tables):
            yield f"fm.v.f{i}", t


def init_fm(schema: FeatureSchema, dim: int, rng: Rng) -> FmParams:
    return FmParams(
        bias=np.zeros(1),
        first_order=init_embedding(schema, 1, rng),
        factors=init_embedding(schema, dim, rng),
    )


def zeros_like_fm(p: FmParams) -> FmParams:
    return FmParams(
        bias=np.zeros_like(p.bias),
        first_order=zeros_like_embedding(p.first_order),
        factors=zeros_like_embedding(p.factors),
    )


def _fm_second_order(emb: Tensor) -> float:
    # sum over pairs of row dot products via 1/2 * ((sum_i e_i)^2 - sum_i e_i^2)
    s = emb.sum(axis=0)
    return 0.5 * float(np.sum(s * s) - np.sum(emb * emb))


@dataclass
class FmTrace:
    example: object
    emb: Tensor
    fo_rows: Tensor


def predict_fm(example, params: FmParams) -> Prediction:
    _check_example(example, params.factors.n_fields)
    emb = embed(example, params.factors)
    fo_rows = embed(example, params.first_order)
    logit = float(params.bias[0]) + float(fo_rows.sum()) + _fm_second_order(emb)
    return Prediction(probability=_sigmoid_scalar(logit), logit=logit,
                      trace=FmTrace(example=example, emb=emb, fo_rows=fo_rows))


def fm_backward(pred: Prediction, label: float, params: FmParams) -> FmParams:
    tr: FmTrace = pred.trace
    d = _logit_grad(pred.probability, float(label))
    grads = zeros_like_fm(params)
    grads.bias += d
    n = params.factors.n_fields
    ones = np.full((n, 1), d)
    grads.first_order = densify_embedding_grads(
        embed_backward(tr.example, params.first_order, ones), params.first_order
    )
    s = tr.emb.sum(axis=0)
    d_emb = d * (s[None, :] - tr.emb)
    grads.factors = densify_embedding_grads(
        embed_backward(tr.example, params.factors, d_emb), params.factors
    )
    return grads


@dataclass
class FmBatchTrace:
    col: Columnar
    emb: Tensor
    probs: Tensor


def forward_batch_fm(col: Columnar, params: FmParams):
    emb = embed_batch(col, params.factors)
    s = emb.sum(axis=1)  # (B, d)
    second = 0.5 * (np.sum(s * s, axis=1) - np.sum(emb * emb, axis=(1, 2)))
    fo = embed_batch(col, params.first_order).sum(axis=(1, 2))
    logits = params.bias[0] + fo + second
    probs = 1.0 / (1.0 + np.exp(-np.abs(logits)))
    probs = np.where(logits >= 0, probs, 1.0 - probs)
    return probs, logits, FmBatchTrace(col=col, emb=emb, probs=probs)


def backward_batch_fm(trace: FmBatchTrace, params: FmParams, d_logits: Tensor) -> FmParams:
    grads = zeros_like_fm(params)
    grads.bias += d_logits.sum()
    B, n, _ = trace.emb.shape
    up = np.broadcast_to(d_logits[:, None, None], (B, n, 1))
    grads.first_order = embed_batch_backward(trace.col, params.first_order, up)
    s = trace.emb.sum(axis=1)
    d_emb = d_logits[:, None, None] * (s[:, None, :] - trace.emb)
    grads.factors = embed_batch_backward(trace.col, params.factors, d_emb)
    return grads


# ---------------------------------------------------------------------------
# DeepFM baseline


@dataclass
class DeepFmParams:
    fm: FmParams
    deep: DeepParams  # over the flattened shared embeddings

    def named_tensors(self):
        yield from self.fm.named_tensors()
        yield from self.deep.named_tensors()


def init_deepfm(schema: FeatureSchema, dim: int, rng: Rng, *, deep_hidden=(64, 64)) -> DeepFmParams:
    return DeepFmParams(
        fm=init_fm(schema, dim, rng),
        deep=init_deep(schema.n_fields * dim, deep_hidden, rng),
    )


def zeros_like_deepfm(p: DeepFmParams) -> DeepFmParams:
    return DeepFmParams(fm=zeros_like_fm(p.fm), deep=zeros_like_deep(p.deep))


@dataclass
class DeepFmTrace:
    example: object
    emb: Tensor
    fo_rows: Tensor
    deep: DeepTrace


def predict_deepfm(example, params: DeepFmParams) -> Prediction:
    _check_example(example, params.fm.factors.n_fields)
    emb = embed(example, params.fm.factors)
    fo_rows = embed(example, params.fm.first_order)
    fm_logit = float(params.fm.bias[0]) + float(fo_rows.sum()) + _fm_second_order(emb)
    deep_logit, deep_trace = deep_forward(emb.reshape(-1), params.deep)
    logit = fm_logit + deep_logit
    return Prediction(probability=_sigmoid_scalar(logit), logit=logit,
                      trace=DeepFmTrace(example=example, emb=emb, fo_rows=fo_rows,
                                        deep=deep_trace))


def deepfm_backward(pred: Prediction, label: float, params: DeepFmParams) -> DeepFmParams:
    tr: DeepFmTrace = pred.trace
    d = _logit_grad(pred.probability, float(label))
    grads = zeros_like_deepfm(params)
    grads.fm.bias += d
    n, dim = tr.emb.shape
    ones = np.full((n, 1), d)
    grads.fm.first_order = densify_embedding_grads(
        embed_backward(tr.example, params.fm.first_order, ones), params.fm.first_order
    )
    dg, d_flat = deep_backward(tr.deep, params.deep, d)
    grads.deep = dg
    s = tr.emb.sum(axis=0)
    d_emb = d * (s[None, :] - tr.emb) + d_flat.reshape(n, dim)
    grads.fm.factors = densify_embedding_grads(
        embed_backward(tr.example, params.fm.factors, d_emb), params.fm.factors
    )
    return grads


@dataclass
class DeepFmBatchTrace:
    col: Columnar
    emb: Tensor
    deep: DeepTrace
    probs: Tensor


def forward_batch_deepfm(col: Columnar, params: DeepFmParams):
    emb = embed_batch(col, params.fm.factors)
    B, n, dim = emb.shape
    s = emb.sum(axis=1)
    second = 0.5 * (np.sum(s * s, axis=1) - np.sum(emb * emb, axis=(1, 2)))
    fo = embed_batch(col, params.fm.first_order).sum(axis=(1, 2))
    deep_logits, deep_trace = deep_forward_batch(emb.reshape(B, n * dim), params.deep)
    logits = params.fm.bias[0] + fo + second + deep_logits
    probs = 1.0 / (1.0 + np.exp(-np.abs(logits)))
    probs = np.where(logits >= 0, probs, 1.0 - probs)
    return probs, logits, DeepFmBatchTrace(col=col, emb=emb, deep=deep_trace, probs=probs)


def backward_batch_deepfm(trace: DeepFmBatchTrace, params: DeepFmParams,
                          d_logits: Tensor) -> DeepFmParams:
    grads = zeros_like_deepfm(params)
    grads.fm.bias += d_logits.sum()
    B, n, dim = trace.emb.shape
    up = np.broadcast_to(d_logits[:, None, None], (B, n, 1))
    grads.fm.first_order = embed_batch_backward(trace.col, params.fm.first_order, up)
    dg, d_flat = deep_backward_batch(trace.deep, params.deep, d_logits)
    grads.deep = dg
    s = trace.emb.sum(axis=1)
    d_emb = d_logits[:, None, None] * (s[:, None, :] - trace.emb) + d_flat.reshape(B, n, dim)
    grads.fm.factors = embed_batch_backward(trace.col, params.fm.factors, d_emb)
    return grads


# ---------------------------------------------------------------------------
# uniform dispatch for the trainer and CLI


@dataclass(frozen=True)
class ModelOps:
    kind: str
    init: object
    predict: object
    backward: object
    forward_batch: object
    backward_batch: object


_OPS = {
    "ours": ModelOps("ours", init_model, predict, model_backward,
                     forward_batch, backward_batch),
    "fm": ModelOps("fm", lambda schema, dim, rng, **kw: init_fm(schema, dim, rng),
                   predict_fm, fm_backward, forward_batch_fm, backward_batch_fm),
    "deepfm": ModelOps("deepfm",
                       lambda schema, dim, rng, **kw: init_deepfm(
                           schema, dim, rng, deep_hidden=kw.get("deep_hidden", (64, 64))
                       ),
                       predict_deepfm, deepfm_backward,
                       forward_batch_deepfm, backward_batch_deepfm),
}


def ops_for(kind: str) -> ModelOps:
    if kind not in _OPS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(_OPS)}")
    return _OPS[kind]
