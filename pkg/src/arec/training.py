"""Mini-batch training: Adam with global-norm clipping, seeded shuffling,
early stopping on validation AUC, and the embedding-dimension sweep driver.

Everything is deterministic under a fixed seed: shuffles come from one
seeded stream, batches are consecutive slices of the permutation, and all
reductions run in a fixed order.  Two runs with identical config and data
produce bit-identical parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CATEGORICAL, ConfigError, FeatureSchema
from .embedding import Columnar
from .losses import (
    PROB_FLOOR,
    difference_loss,
    logloss,
    similarity_loss,
)
from .metrics import auc as compute_auc
from .model import ModelOps, ops_for
from .numerics import Rng


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 15
    patience: int = 3
    seed: int = 0
    lambda_sim: float = 0.1
    lambda_diff: float = 0.1
    dim: int = 16
    mode: str = "combined"
    heads: int = 2
    ac_hidden: int = 32
    deep_hidden: tuple = (64, 64)
    attn_dim: int = None
    first_order: bool = False
    sweep_dims: tuple = (8, 16, 32, 64)
    clip_norm: float = 10.0
    deterministic: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        # learning_rate 0 is allowed: it turns the optimizer into a no-op,
        # which the contracts rely on for frozen-parameter checks.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        return self

    def model_kwargs(self) -> dict:
        return {
            "heads": self.heads,
            "ac_hidden": self.ac_hidden,
            "deep_hidden": tuple(self.deep_hidden),
            "mode": self.mode,
            "first_order": self.first_order,
            "attn_dim": self.attn_dim,
        }


@dataclass
class BestSnapshot:
    params: object
    m: dict
    v: dict
    t: int
    rng_state: dict
    epoch: int
    val_auc: float
    val_logloss: float


@dataclass
class TrainState:
    params: object
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    epoch: int = 0
    rng: Rng = None
    best: BestSnapshot = None
    bad_epochs: int = 0


def init_state(ops: ModelOps, schema: FeatureSchema, config: TrainConfig) -> TrainState:
    config.validate()
    rng = Rng(config.seed)
    params = ops.init(schema, config.dim, rng.child(1), **config.model_kwargs())
    state = TrainState(params=params, rng=rng.child(2))
    for name, tensor in params.named_tensors():
        state.m[name] = np.zeros_like(tensor)
        state.v[name] = np.zeros_like(tensor)
    return state


def clip_gradients(grads, max_norm: float) -> float:
    """Scale all gradient tensors so their global norm is at most max_norm."""
    total = 0.0
    tensors = [g for _, g in grads.named_tensors()]
    for g in tensors:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in tensors:
            g *= scale
    return norm


def adam_update(state: TrainState, grads, config: TrainConfig):
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for (name, p), (_, g) in zip(state.params.named_tensors(), grads.named_tensors()):
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + config.epsilon)


# ---------------------------------------------------------------------------
# modality loss bookkeeping


@dataclass
class ModalityBatcher:
    """Per-index modality features aligned with the item field's vocabulary."""

    field_index: int
    shared_audio: np.ndarray  # (cardinality, d_m)
    shared_visual: np.ndarray
    private_audio: np.ndarray
    private_visual: np.ndarray
    present: np.ndarray  # (cardinality,) bool

    @staticmethod
    def build(schema: FeatureSchema, table: dict) -> "ModalityBatcher":
        idx = item_field_index(schema)
        if idx is None:
            raise ConfigError(
                "modality features supplied but the schema has no item id field"
            )
        spec = schema.fields[idx]
        dims = {fs.dim for fs in table.values()}
        if len(dims) != 1:
            raise ConfigError(f"modality feature dimensions disagree: {sorted(dims)}")
        d_m = dims.pop()
        card = spec.cardinality
        arrays = {k: np.zeros((card, d_m)) for k in ("sa", "sv", "pa", "pv")}
        present = np.zeros(card, dtype=bool)
        for key, fs in table.items():
            row = spec.index_of(key)
            if row == 0 and isinstance(key, str):
                # feature files carry text keys; integer-id vocabularies
                # (movie ids) need the numeric form
                try:
                    row = spec.index_of(int(key))
                except ValueError:
                    pass
            if row == 0:
                continue  # item absent from the training vocabulary
            arrays["sa"][row] = fs.shared_audio
            arrays["sv"][row] = fs.shared_visual
            arrays["pa"][row] = fs.private_audio
            arrays["pv"][row] = fs.private_visual
            present[row] = True
        return ModalityBatcher(
            field_index=idx,
            shared_audio=arrays["sa"],
            shared_visual=arrays["sv"],
            private_audio=arrays["pa"],
            private_visual=arrays["pv"],
            present=present,
        )

    def batch_terms(self, col: Columnar):
        """(similarity, difference, count) over batch items with features."""
        rows = col.fields[self.field_index].idx
        rows = rows[self.present[rows]]
        if rows.size == 0:
            return 0.0, 0.0, 0
        l_s = similarity_loss(self.shared_audio[rows], self.shared_visual[rows])
        l_d = 0.0
        for r in rows:
            l_d += difference_loss(
                self.private_audio[r], self.shared_audio[r],
                self.private_visual[r], self.shared_visual[r],
            )
        return l_s, l_d / rows.size, int(rows.size)


def item_field_index(schema: FeatureSchema):
    for i, spec in enumerate(schema.fields):
        if spec.kind == CATEGORICAL and spec.name in ("movie_id", "product_id", "item_id"):
            return i
    return None


# ---------------------------------------------------------------------------
# epoch and fit


@dataclass
class EpochMetrics:
    train_loss: float
    l_s: float = None
    l_d: float = None


def train_epoch(ops: ModelOps, state: TrainState, train_col: Columnar,
                config: TrainConfig, modality: ModalityBatcher = None) -> EpochMetrics:
    n = train_col.n
    perm = state.rng.permutation(n)
    loss_sum = 0.0
    sim_sum = 0.0
    diff_sum = 0.0
    sim_n = 0
    for b, lo in enumerate(range(0, n, config.batch_size)):
        idx = perm[lo : lo + config.batch_size]
        batch = train_col.take(idx)
        probs, _, trace = ops.forward_batch(batch, state.params)
        batch_loss = logloss(probs, batch.labels)
        if not np.isfinite(batch_loss):
            raise DivergenceError(
                f"non-finite loss at epoch {state.epoch + 1}, batch {b}"
            )
        loss_sum += batch_loss * len(idx)
        inside = (probs > PROB_FLOOR) & (probs < 1.0 - PROB_FLOOR)
        d_logits = (probs - batch.labels) * inside / len(idx)
        grads = ops.backward_batch(trace, state.params, d_logits)
        clip_gradients(grads, config.clip_norm)
        adam_update(state, grads, config)
        if modality is not None:
            l_s, l_d, count = modality.batch_terms(batch)
            sim_sum += l_s * count
            diff_sum += l_d * count
            sim_n += count
    state.epoch += 1
    train_loss = loss_sum / n
    metrics = EpochMetrics(train_loss=train_loss)
    if modality is not None:
        metrics.l_s = sim_sum / sim_n if sim_n else 0.0
        metrics.l_d = diff_sum / sim_n if sim_n else 0.0
        metrics.train_loss = (
            train_loss + config.lambda_sim * metrics.l_s + config.lambda_diff * metrics.l_d
        )
    return metrics


@dataclass
class CurvePoint:
    epoch: int
    train_loss: float
    val_auc: float
    val_logloss: float
    dim: int
    seed: int
    l_s: float = None
    l_d: float = None

    def csv_row(self) -> str:
        row = (
            f"{self.epoch},{self.train_loss!r},{self.val_auc!r},"
            f"{self.val_logloss!r},{self.dim},{self.seed}"
        )
        if self.l_s is not None:
            row += f",{self.l_s!r},{self.l_d!r}"
        return row


def curve_csv_header(with_modality: bool = False) -> str:
    head = "epoch,train_loss,val_auc,val_logloss,d,seed"
    return head + ",l_s,l_d" if with_modality else head


@dataclass
class FitResult:
    state: TrainState
    curve: list
    epochs_run: int


def _eval_columnar(ops, params, col: Columnar):
    probs = np.empty(col.n)
    for lo in range(0, col.n, 4096):
        chunk = col.take(np.arange(lo, min(lo + 4096, col.n)))
        p, _, _ = ops.forward_batch(chunk, params)
        probs[lo : lo + len(p)] = p
    return compute_auc(probs, col.labels), logloss(probs, col.labels)


def fit(ops: ModelOps, schema: FeatureSchema, train_examples, val_examples,
        config: TrainConfig, modality_table: dict = None) -> FitResult:
    config.validate()
    state = init_state(ops, schema, config)
    train_col = Columnar.from_examples(train_examples, schema)
    val_col = Columnar.from_examples(val_examples, schema)
    modality = None
    if modality_table is not None:
        modality = ModalityBatcher.build(schema, modality_table)
    curve = []
    for _ in range(config.max_epochs):
        em = train_epoch(ops, state, train_col, config, modality)
        val_auc, val_ll = _eval_columnar(ops, state.params, val_col)
        curve.append(
            CurvePoint(epoch=state.epoch, train_loss=em.train_loss, val_auc=val_auc,
                       val_logloss=val_ll, dim=config.dim, seed=config.seed,
                       l_s=em.l_s, l_d=em.l_d)
        )
        if state.best is None or val_auc > state.best.val_auc:
            state.best = BestSnapshot(
                params=copy.deepcopy(state.params),
                m=copy.deepcopy(state.m),
                v=copy.deepcopy(state.v),
                t=state.t,
                rng_state=state.rng.get_state(),
                epoch=state.epoch,
                val_auc=val_auc,
                val_logloss=val_ll,
            )
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
            if state.bad_epochs >= config.patience:
                break
    return FitResult(state=state, curve=curve, epochs_run=state.epoch)


# ---------------------------------------------------------------------------
# embedding-dimension sweep


@dataclass
class SweepRow:
    dim: int
    auc: float
    logloss: float

    def csv_row(self) -> str:
        return f"{self.dim},{self.auc!r},{self.logloss!r}"


SWEEP_CSV_HEADER = "d,auc,logloss"


@dataclass
class SweepResult:
    rows: list  # SweepRow, successful dims in input order
    curves: dict  # dim -> list of CurvePoint
    failures: list  # (dim, message)


def sweep(kind: str, schema: FeatureSchema, train_examples, val_examples,
          test_examples, config: TrainConfig, dims) -> SweepResult:
    dims = list(dims)
    if not dims or any(int(d) < 1 for d in dims):
        raise ConfigError(f"sweep needs a non-empty list of positive dims, got {dims}")
    ops = ops_for(kind)
    test_col = Columnar.from_examples(test_examples, schema)
    rows, curves, failures = [], {}, []
    for d in dims:
        cfg = replace(config, dim=int(d))
        try:
            result = fit(ops, schema, train_examples, val_examples, cfg)
            test_auc, test_ll = _eval_columnar(ops, result.state.best.params, test_col)
        except (DivergenceError, ArithmeticError) as exc:
            failures.append((int(d), str(exc)))
            continue
        rows.append(SweepRow(dim=int(d), auc=test_auc, logloss=test_ll))
        curves[int(d)] = result.curve
    return SweepResult(rows=rows, curves=curves, failures=failures)
