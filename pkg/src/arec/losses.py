"""Training losses and the modality-feature machinery.

Covers the binary cross-entropy objective, the shared-feature similarity
loss, the private-vs-shared KL difference loss (base-2, over softmax-mapped
distributions), and user-conditioned attention fusion of modality vectors.
Modality features arrive precomputed, from a text file or the synthetic
generator; the upstream audio/visual extractors are out of scope, so the
two modality losses are reported terms with gradients taken with respect
to the feature vectors themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DomainError, ParseError
from .numerics import Rng, Tensor, relu, softmax, softmax_backward

# Predicted probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR]
# before taking logs, in training and evaluation alike.
PROB_FLOOR = 1e-7

# Softmax-mapped distributions are floored here before the KL ratio.
DIST_FLOOR = 1e-12

LN2 = math.log(2.0)


def clamp_probs(p: Tensor) -> Tensor:
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def logloss(preds, labels) -> float:
    """Mean negative log-likelihood, natural log, clamped probabilities."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or p.size < 1:
        raise DomainError(f"logloss needs matching 1-d inputs, got {p.shape} and {y.shape}")
    pc = clamp_probs(p)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))


def logloss_grad(preds, labels) -> Tensor:
    """d(logloss)/d(preds); zero where the clamp is active."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    pc = clamp_probs(p)
    inside = (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    g = (pc - y) / (pc * (1.0 - pc) * p.size)
    return g * inside


def similarity_loss(shared_a: Tensor, shared_v: Tensor) -> float:
    """Half mean squared distance between the two shared-domain feature batches."""
    a = np.atleast_2d(np.asarray(shared_a, dtype=np.float64))
    v = np.atleast_2d(np.asarray(shared_v, dtype=np.float64))
    if a.shape != v.shape or a.shape[0] < 1:
        raise DomainError(f"similarity_loss shape mismatch: {a.shape} vs {v.shape}")
    diff = a - v
    return float(np.sum(diff * diff) / (2.0 * a.shape[0]))


def similarity_loss_grad(shared_a: Tensor, shared_v: Tensor):
    a = np.atleast_2d(np.asarray(shared_a, dtype=np.float64))
    v = np.atleast_2d(np.asarray(shared_v, dtype=np.float64))
    diff = (a - v) / a.shape[0]
    da = diff.reshape(np.shape(shared_a))
    return da, -da


def _kl_base2(p_feat: Tensor, q_feat: Tensor) -> float:
    p = np.maximum(softmax(np.asarray(p_feat, dtype=np.float64)), DIST_FLOOR)
    q = np.maximum(softmax(np.asarray(q_feat, dtype=np.float64)), DIST_FLOOR)
    return float(np.sum(p * (np.log(p) - np.log(q)) / LN2))


def _kl_base2_grad(p_feat: Tensor, q_feat: Tensor):
    p_raw = softmax(np.asarray(p_feat, dtype=np.float64))
    q_raw = softmax(np.asarray(q_feat, dtype=np.float64))
    p = np.maximum(p_raw, DIST_FLOOR)
    q = np.maximum(q_raw, DIST_FLOOR)
    dp = ((np.log(p) - np.log(q)) / LN2 + 1.0 / LN2) * (p_raw > DIST_FLOOR)
    dq = -(p / q) / LN2 * (q_raw > DIST_FLOOR)
    return softmax_backward(p_raw, dp), softmax_backward(q_raw, dq)


def difference_loss(private_a: Tensor, shared_a: Tensor,
                    private_v: Tensor, shared_v: Tensor) -> float:
    """Base-2 KL between softmax-mapped private and shared features, both modalities."""
    pa, sa = np.asarray(private_a), np.asarray(shared_a)
    pv, sv = np.asarray(private_v), np.asarray(shared_v)
    if pa.shape != sa.shape or pv.shape != sv.shape:
        raise DomainError("difference_loss dimension mismatch within a modality")
    return _kl_base2(pa, sa) + _kl_base2(pv, sv)


def difference_loss_grad(private_a, shared_a, private_v, shared_v):
    d_pa, d_sa = _kl_base2_grad(np.asarray(private_a), np.asarray(shared_a))
    d_pv, d_sv = _kl_base2_grad(np.asarray(private_v), np.asarray(shared_v))
    return d_pa, d_sa, d_pv, d_sv


# ---------------------------------------------------------------------------
# modality feature sets


MODALITY_TAGS = ("sa", "sv", "pa", "pv")


@dataclass
class ModalityFeatureSet:
    """Four equal-length feature vectors for one item, plus their source."""

    shared_audio: Tensor
    shared_visual: Tensor
    private_audio: Tensor
    private_visual: Tensor
    source: str = "file"

    def __post_init__(self):
        dims = {
            v.shape
            for v in (self.shared_audio, self.shared_visual,
                      self.private_audio, self.private_visual)
        }
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise DomainError(f"modality vectors must share one 1-d shape, got {sorted(dims)}")
        for v in (self.shared_audio, self.shared_visual, self.private_audio, self.private_visual):
            if not np.all(np.isfinite(v)):
                raise DomainError("non-finite modality feature")

    @property
    def dim(self) -> int:
        return self.shared_audio.shape[0]


_TAG_FIELD = {
    "sa": "shared_audio",
    "sv": "shared_visual",
    "pa": "private_audio",
    "pv": "private_visual",
}


def load_modality_features(path) -> dict:
    """Parse `item_id tag v1,v2,...` lines into one ModalityFeatureSet per item."""
    raw: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{ln}: expected `item_id tag v1,...`, got {len(parts)} tokens")
            item, tag, payload = parts
            if tag not in MODALITY_TAGS:
                raise ParseError(f"{path}:{ln}: unknown tag {tag!r}")
            try:
                vec = np.array([float(tok) for tok in payload.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: bad vector: {exc}") from None
            raw.setdefault(item, {})[tag] = vec
    table = {}
    for item, tags in raw.items():
        missing = [t for t in MODALITY_TAGS if t not in tags]
        if missing:
            raise DomainError(f"item {item}: missing modality tags {missing}")
        table[item] = ModalityFeatureSet(
            source="file", **{_TAG_FIELD[t]: tags[t] for t in MODALITY_TAGS}
        )
    return table


def save_modality_features(table: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in sorted(table, key=str):
            fs = table[item]
            for tag in MODALITY_TAGS:
                vec = getattr(fs, _TAG_FIELD[tag])
                fh.write(f"{item} {tag} {','.join(repr(float(x)) for x in vec)}\n")


def synthesize_modality_features(item_keys, dim: int, seed: int) -> dict:
    """Synthetic stand-in features: shared audio/visual correlated, private distinct."""
    rng = Rng(seed)
    table = {}
    for item in item_keys:
        base = rng.normal((dim,))
        table[item] = ModalityFeatureSet(
            shared_audio=base + 0.1 * rng.normal((dim,)),
            shared_visual=base + 0.1 * rng.normal((dim,)),
            private_audio=rng.normal((dim,)),
            private_visual=rng.normal((dim,)),
            source="synthetic",
        )
    return table


# ---------------------------------------------------------------------------
# user-conditioned modality fusion


@dataclass
class FusionParams:
    """Shared scoring MLP over concat(user embedding, modality vector)."""

    w1: Tensor  # (hidden, d_user + d_m)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (hidden,)
    b2: float

    def named_tensors(self):
        yield "fusion.w1", self.w1
        yield "fusion.b1", self.b1
        yield "fusion.w2", self.w2


def init_fusion(user_dim: int, modality_dim: int, rng: Rng, hidden: int = 32) -> FusionParams:
    fan_in = user_dim + modality_dim
    return FusionParams(
        w1=rng.normal((hidden, fan_in), std=math.sqrt(2.0 / (fan_in + hidden))),
        b1=np.zeros(hidden),
        w2=rng.normal((hidden,), std=0.1),
        b2=0.0,
    )


@dataclass
class FusionTrace:
    user: Tensor
    modalities: list
    z: Tensor  # (K, hidden)
    a: Tensor  # relu(z)
    weights: Tensor  # (K,)
    fused: Tensor


def fuse_modalities(user_emb: Tensor, modality_vecs, params: FusionParams):
    """Softmax-weighted combination of modality vectors, scored per user.

    Returns (fused vector, weights, trace).
    """
    if len(modality_vecs) < 1:
        raise DomainError("need at least one modality vector")
    dims = {np.shape(v) for v in modality_vecs}
    if len(dims) != 1:
        raise DomainError(f"modality vectors disagree on shape: {sorted(dims)}")
    user = np.asarray(user_emb, dtype=np.float64)
    mods = [np.asarray(v, dtype=np.float64) for v in modality_vecs]
    inputs = np.stack([np.concatenate([user, m]) for m in mods])  # (K, du+dm)
    z = np.einsum("hi,ki->kh", params.w1, inputs, optimize=False) + params.b1
    a = relu(z)
    logits = np.einsum("kh,h->k", a, params.w2, optimize=False) + params.b2
    weights = softmax(logits)
    fused = np.einsum("k,kd->d", weights, np.stack(mods), optimize=False)
    return fused, weights, FusionTrace(user=user, modalities=mods, z=z, a=a,
                                       weights=weights, fused=fused)


def fuse_modalities_backward(trace: FusionTrace, params: FusionParams, d_fused: Tensor):
    """Gradients of the fused vector path; returns (param grads, d_user, d_modalities)."""
    mods = np.stack(trace.modalities)  # (K, dm)
    d_weights = np.einsum("kd,d->k", mods, d_fused, optimize=False)
    d_logits = softmax_backward(trace.weights, d_weights)
    da = d_logits[:, None] * params.w2[None, :]
    dz = da * (trace.z > 0)
    inputs = np.stack([np.concatenate([trace.user, m]) for m in trace.modalities])
    grads = FusionParams(
        w1=np.einsum("kh,ki->hi", dz, inputs, optimize=False),
        b1=dz.sum(axis=0),
        w2=np.einsum("kh,k->h", trace.a, d_logits, optimize=False),
        b2=float(d_logits.sum()),
    )
    d_inputs = np.einsum("kh,hi->ki", dz, params.w1, optimize=False)
    du = trace.user.shape[0]
    d_user = d_inputs[:, :du].sum(axis=0)
    d_mods = [d_inputs[k, du:] + trace.weights[k] * d_fused for k in range(mods.shape[0])]
    return grads, d_user, d_mods
