"""Shared utilities for the test suite: random schema/example generators,
finite-difference sweeps over whole parameter sets, and small fixtures."""

import numpy as np

from arec.data import (
    CATEGORICAL,
    CONTINUOUS,
    MULTI_CATEGORICAL,
    EncodedExample,
    FeatureSchema,
    FieldSpec,
)
from arec.losses import logloss
from arec.numerics import finite_diff_grad, rel_error


def make_schema(field_plan):
    """Build a schema from (name, kind, vocab_size_or_bounds) triples."""
    fields = []
    for name, kind, extra in field_plan:
        if kind == CONTINUOUS:
            lo, hi = extra
            fields.append(FieldSpec(name=name, kind=kind, vocab=(), lo=lo, hi=hi))
        else:
            vocab = tuple(f"{name}_{v}" for v in range(extra))
            fields.append(FieldSpec(name=name, kind=kind, vocab=vocab))
    return FeatureSchema(fields=tuple(fields))


def random_schema(gen, max_fields=6):
    """Random schema with 2..max_fields fields mixing all three kinds."""
    n = int(gen.integers(2, max_fields + 1))
    plan = []
    kinds = [CATEGORICAL, MULTI_CATEGORICAL, CONTINUOUS]
    for i in range(n):
        kind = kinds[int(gen.integers(0, 3))] if i >= 2 else CATEGORICAL
        if kind == CONTINUOUS:
            plan.append((f"f{i}", kind, (0.0, 1.0)))
        else:
            plan.append((f"f{i}", kind, int(gen.integers(2, 6))))
    return make_schema(plan)


def random_example(schema, gen, label=None):
    values = []
    for spec in schema.fields:
        if spec.kind == CATEGORICAL:
            values.append(int(gen.integers(0, spec.cardinality)))
        elif spec.kind == MULTI_CATEGORICAL:
            q = int(gen.integers(1, spec.cardinality))
            picks = gen.choice(spec.cardinality, size=q, replace=False)
            values.append(tuple(sorted(int(p) for p in picks)))
        else:
            values.append(float(gen.uniform()))
    if label is None:
        label = float(gen.integers(0, 2))
    return EncodedExample(values=tuple(values), label=label)


def named_arrays(params):
    return list(params.named_tensors())


def model_loss(ops, params, example, label) -> float:
    pred = ops.predict(example, params)
    return logloss([pred.probability], [label])


def relu_kink_margin(pred) -> float:
    """Smallest |pre-activation| across every relu in the forward trace.

    Central differences are only trustworthy when no perturbation can flip a
    relu gate, so finite-difference sweeps skip draws with a tiny margin.
    """
    margin = float("inf")
    tr = pred.trace
    branch = getattr(tr, "branch", None)
    if branch is not None:
        margin = min(margin, float(np.min(np.abs(branch.mhsa.pre))))
        margin = min(margin, float(np.min(np.abs(branch.ac.z))))
    deep = getattr(tr, "deep", None)
    if deep is not None:
        for z in deep.pres[:-1]:  # last layer is linear
            if z.size:
                margin = min(margin, float(np.min(np.abs(z))))
    return margin


def fd_check_all_tensors(ops, params, example, label, eps=1e-5, floor=1e-3):
    """Worst relative error between analytic and central-difference gradients
    over every named tensor of `params`."""
    pred = ops.predict(example, params)
    grads = dict(ops.backward(pred, label, params).named_tensors())
    worst = 0.0
    for name, arr in params.named_tensors():
        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x
            val = model_loss(ops, params, example, label)
            arr[...] = saved
            return val
        fd = finite_diff_grad(f, arr.copy(), eps=eps)
        worst = max(worst, rel_error(grads[name], fd, floor=floor))
    return worst


def separable_examples(n_users=20, per_user=10):
    """Dataset whose label is decided by the user field alone: the first
    half of the users always click, the second half never do."""
    schema = make_schema([
        ("user_id", CATEGORICAL, n_users),
        ("item_id", CATEGORICAL, 10),
    ])
    gen = np.random.default_rng(123)
    examples = []
    for u in range(1, n_users + 1):
        for _ in range(per_user):
            item = int(gen.integers(1, 11))
            label = 1.0 if u <= n_users // 2 else 0.0
            examples.append(EncodedExample(values=(u, item), label=label))
    order = gen.permutation(len(examples))
    return schema, [examples[i] for i in order]
