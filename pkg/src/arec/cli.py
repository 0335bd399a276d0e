"""Command-line entry point: dataset preparation, training, evaluation,
and the embedding-dimension sweep.

Checkpoints are single little-endian binary files ("ARECKPT1"): schema
hash, config snapshot, every parameter tensor by name, both Adam moment
sets, the RNG state, and best-epoch metadata.  Round-tripping a checkpoint
reproduces parameters and optimizer state bit for bit.

Exit codes: 0 success, 2 input or config error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import struct
import sys

import numpy as np

from .data import (
    CacheError,
    ConfigError,
    DomainError,
    EncodingError,
    ParseError,
    ReferentialError,
    load_cache,
    parse_amazon,
    parse_movielens,
    prepare_dataset,
    save_cache,
)
from .losses import load_modality_features
from .metrics import EVAL_CSV_HEADER, MetricUndefinedError, evaluate
from .model import ops_for
from .numerics import Rng
from .training import (
    BestSnapshot,
    DivergenceError,
    SWEEP_CSV_HEADER,
    TrainConfig,
    curve_csv_header,
    fit,
    sweep,
)

CKPT_MAGIC = b"ARECKPT1"
CKPT_VERSION = 1

_INPUT_ERRORS = (
    ParseError,
    ReferentialError,
    DomainError,
    ConfigError,
    EncodingError,
    CacheError,
    MetricUndefinedError,
    OSError,
)


# ---------------------------------------------------------------------------
# config files


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(tok) for tok in raw.split(","))


def _parse_optional_int(raw: str):
    low = raw.strip().lower()
    if low in ("", "none"):
        return None
    return int(raw)


_COERCERS = {
    "batch_size": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "epsilon": float,
    "max_epochs": int,
    "patience": int,
    "seed": int,
    "lambda_sim": float,
    "lambda_diff": float,
    "dim": int,
    "mode": str.strip,
    "heads": int,
    "ac_hidden": int,
    "deep_hidden": _parse_int_tuple,
    "attn_dim": _parse_optional_int,
    "first_order": _parse_bool,
    "sweep_dims": _parse_int_tuple,
    "clip_norm": float,
    "deterministic": _parse_bool,
}


def _apply_setting(config: TrainConfig, key: str, raw: str):
    key = key.strip()
    if key not in _COERCERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(config, key, _COERCERS[key](raw))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def read_config(path) -> TrainConfig:
    """Flat key=value file, # comments and blank lines allowed."""
    config = TrainConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            try:
                _apply_setting(config, key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{ln}: {exc}") from None
    return config


def _config_from_args(args) -> TrainConfig:
    config = read_config(args.config) if args.config else TrainConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_setting(config, key, raw)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "dim", None) is not None:
        config.dim = args.dim
    return config.validate()


# ---------------------------------------------------------------------------
# checkpoint format


def _w_block(fh, payload: bytes):
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _w_tensors(fh, named):
    named = list(named)
    fh.write(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CacheError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def block(self) -> bytes:
        return self.take(self.u64())

    def tensors(self) -> dict:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u16()).decode("utf-8")
            shape = tuple(self.u64() for _ in range(self.u8()))
            count = 1
            for dim in shape:
                count *= dim
            arr = np.frombuffer(self.take(count * 8), dtype="<f8").reshape(shape)
            out[name] = arr.copy()
        return out


@dataclasses.dataclass
class Checkpoint:
    kind: str
    config: TrainConfig
    schema_hash: str
    tensors: dict
    m: dict
    v: dict
    t: int
    rng_state: dict
    best_epoch: int
    val_auc: float
    val_logloss: float


def save_checkpoint(path, kind: str, config: TrainConfig, schema_hash: str,
                    best: BestSnapshot) -> None:
    header = {
        "kind": kind,
        "config": dataclasses.asdict(config),
        "best_epoch": best.epoch,
        "val_auc": best.val_auc,
        "val_logloss": best.val_logloss,
        "t": best.t,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(bytes.fromhex(schema_hash))
        _w_block(fh, json.dumps(header, sort_keys=True).encode("utf-8"))
        _w_block(fh, json.dumps(best.rng_state, sort_keys=True).encode("utf-8"))
        _w_tensors(fh, best.params.named_tensors())
        _w_tensors(fh, best.m.items())
        _w_tensors(fh, best.v.items())


def _config_from_dict(raw: dict) -> TrainConfig:
    config = TrainConfig(**raw)
    config.deep_hidden = tuple(config.deep_hidden)
    config.sweep_dims = tuple(config.sweep_dims)
    return config


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(8) != CKPT_MAGIC:
        raise CacheError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CacheError(f"{path}: unsupported checkpoint version {version}")
    schema_hash = r.take(32).hex()
    header = json.loads(r.block().decode("utf-8"))
    rng_state = json.loads(r.block().decode("utf-8"))
    tensors = r.tensors()
    m = r.tensors()
    v = r.tensors()
    if r.pos != len(blob):
        raise CacheError(f"{path}: trailing bytes in checkpoint")
    return Checkpoint(
        kind=header["kind"],
        config=_config_from_dict(header["config"]),
        schema_hash=schema_hash,
        tensors=tensors,
        m=m,
        v=v,
        t=header["t"],
        rng_state=rng_state,
        best_epoch=header["best_epoch"],
        val_auc=header["val_auc"],
        val_logloss=header["val_logloss"],
    )


def rebuild_params(ckpt: Checkpoint, schema):
    """Instantiate the model and overwrite every tensor from the checkpoint."""
    ops = ops_for(ckpt.kind)
    params = ops.init(schema, ckpt.config.dim, Rng(ckpt.config.seed).child(1),
                      **ckpt.config.model_kwargs())
    names = set(ckpt.tensors)
    for name, tensor in params.named_tensors():
        if name not in ckpt.tensors:
            raise CacheError(f"checkpoint missing tensor {name}")
        stored = ckpt.tensors[name]
        if stored.shape != tensor.shape:
            raise CacheError(
                f"checkpoint tensor {name} has shape {stored.shape}, model expects {tensor.shape}"
            )
        tensor[...] = stored
        names.discard(name)
    if names:
        raise CacheError(f"checkpoint holds unknown tensors: {sorted(names)}")
    return ops, params


# ---------------------------------------------------------------------------
# subcommands


def _threads_from_env() -> int:
    raw = os.environ.get("AREC_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"AREC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"AREC_THREADS must be >= 1, got {n}")
    return n


def cmd_prepare(args) -> int:
    if args.dataset == "movielens":
        base = args.input
        records = parse_movielens(
            os.path.join(base, "ratings.dat"),
            os.path.join(base, "users.dat"),
            os.path.join(base, "movies.dat"),
        )
    else:
        path = args.input
        if os.path.isdir(path):
            path = os.path.join(path, "reviews.json")
        records = parse_amazon(path)
    ratios = tuple(float(tok) for tok in args.ratios.split(","))
    tag = args.tag or args.dataset
    dataset = prepare_dataset(records, ratios=ratios, seed=args.seed, tag=tag)
    save_cache(args.out, dataset)
    print(f"dataset: {tag}")
    print(f"interactions: {len(records)}")
    for spec in dataset.schema.fields:
        if spec.kind == "continuous":
            print(f"  field {spec.name}: {spec.kind}, range [{spec.lo}, {spec.hi}]")
        else:
            print(f"  field {spec.name}: {spec.kind}, cardinality {spec.cardinality}")
    s = dataset.split
    print(f"splits: train={len(s.train)} val={len(s.validation)} test={len(s.test)}")
    print(f"cache written to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    dataset = load_cache(args.cache)
    modality = None
    if args.modality_features:
        modality = load_modality_features(args.modality_features)
    ops = ops_for(args.model)
    try:
        result = fit(ops, dataset.schema, dataset.split.train, dataset.split.validation,
                     config, modality_table=modality)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    best = result.state.best
    save_checkpoint(args.out, args.model, config, dataset.schema.hash_hex(), best)
    curve_path = args.curve or args.out + ".curve.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write(curve_csv_header(with_modality=modality is not None) + "\n")
        for point in result.curve:
            fh.write(point.csv_row() + "\n")
    print(json.dumps(
        {
            "model": args.model,
            "best_epoch": best.epoch,
            "epochs_run": result.epochs_run,
            "val_auc": best.val_auc,
            "val_logloss": best.val_logloss,
        },
        sort_keys=True,
    ))
    print(f"checkpoint written to {args.out}")
    print(f"curve written to {curve_path}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_cache(args.cache)
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.schema_hash != dataset.schema.hash_hex():
        print(
            f"schema mismatch: checkpoint {ckpt.schema_hash[:12]} vs cache "
            f"{dataset.schema.hash_hex()[:12]}",
            file=sys.stderr,
        )
        return 2
    ops, params = rebuild_params(ckpt, dataset.schema)
    examples = dataset.split.validation if args.split == "val" else dataset.split.test
    report = evaluate(ops, params, examples, dataset.schema, tag=args.split)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.csv:
        fresh = not os.path.exists(args.csv)
        with open(args.csv, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write(EVAL_CSV_HEADER + "\n")
            fh.write(report.csv_row() + "\n")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    try:
        dims = _parse_int_tuple(args.dims)
    except ValueError:
        raise ConfigError(f"--dims expects comma-separated integers, got {args.dims!r}") from None
    dataset = load_cache(args.cache)
    os.makedirs(args.out, exist_ok=True)
    result = sweep(args.model, dataset.schema, dataset.split.train,
                   dataset.split.validation, dataset.split.test, config, dims)
    agg = os.path.join(args.out, "sweep.csv")
    with open(agg, "w", encoding="utf-8") as fh:
        fh.write(SWEEP_CSV_HEADER + "\n")
        for row in result.rows:
            fh.write(row.csv_row() + "\n")
    for d, curve in sorted(result.curves.items()):
        with open(os.path.join(args.out, f"curve_d{d}.csv"), "w", encoding="utf-8") as fh:
            fh.write(curve_csv_header() + "\n")
            for point in curve:
                fh.write(point.csv_row() + "\n")
    for d, message in result.failures:
        print(f"dim {d} failed: {message}", file=sys.stderr)
    print(f"sweep results written to {agg}")
    if result.failures:
        return 3
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arec",
        description="Attention-based CTR model: prepare data, train, evaluate, sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse raw data, encode, split, and cache")
    p.add_argument("--dataset", choices=("movielens", "amazon"), required=True)
    p.add_argument("--input", required=True, help="raw data directory")
    p.add_argument("--out", required=True, help="cache file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--tag", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model on a prepared cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--model", choices=("ours", "fm", "deepfm"), default="ours")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--curve", default=None, help="curve CSV path (default <out>.curve.csv)")
    p.add_argument("--modality-features", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cached split")
    p.add_argument("--cache", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--csv", default=None, help="append the report as a CSV row here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train once per embedding dimension")
    p.add_argument("--cache", required=True)
    p.add_argument("--model", choices=("ours", "fm", "deepfm"), default="ours")
    p.add_argument("--dims", required=True, help="comma list, e.g. 8,16,32,64")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads_from_env()
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
