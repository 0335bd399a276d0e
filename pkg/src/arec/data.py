"""Raw interaction parsing, feature schema, encoding, and dataset caching.

Supports the two public rating corpora this engine targets: MovieLens-1M
("::"-delimited triplet files) and Amazon product reviews (JSON lines).
Vocabularies are always fitted on training rows only; anything unseen at
encode time maps to the reserved index 0 of its field.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

from .numerics import Rng

CATEGORICAL = "categorical"
MULTI_CATEGORICAL = "multi_categorical"
CONTINUOUS = "continuous"

CACHE_MAGIC = b"AREC1"
CACHE_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; message carries file and line number."""


class ReferentialError(ValueError):
    """A rating refers to a user or item missing from the side files."""


class DomainError(ValueError):
    """A value outside its documented domain."""


class ConfigError(ValueError):
    """Invalid configuration (ratios, dims, key=value files)."""


class EncodingError(ValueError):
    """An encoded example does not conform to its schema."""


class CacheError(ValueError):
    """Corrupt or mismatched dataset cache file."""


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class FieldSpec:
    """One feature slot: a categorical/multi-valued vocabulary or a continuous range.

    Index 0 of every categorical vocabulary is reserved for out-of-vocabulary
    values, so cardinality is len(vocab) + 1.
    """

    name: str
    kind: str
    vocab: tuple = ()
    lo: float = 0.0
    hi: float = 1.0

    @property
    def cardinality(self) -> int:
        if self.kind == CONTINUOUS:
            raise DomainError(f"continuous field {self.name!r} has no cardinality")
        return len(self.vocab) + 1

    def index_of(self, value) -> int:
        """Vocabulary index of `value`, 0 if unseen."""
        table = getattr(self, "_index", None)
        if table is None:
            # derived lookup map, cached on the frozen instance
            table = {v: i + 1 for i, v in enumerate(self.vocab)}
            object.__setattr__(self, "_index", table)
        return table.get(value, 0)

    def value_of(self, index: int):
        """Inverse of index_of for in-vocabulary indices; None for the reserved slot."""
        if index == 0:
            return None
        return self.vocab[index - 1]


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate field names in schema: {names}")

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def field_named(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_json(self) -> str:
        payload = {
            "fields": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "vocab": list(f.vocab),
                    "lo": f.lo,
                    "hi": f.hi,
                }
                for f in self.fields
            ]
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "FeatureSchema":
        payload = json.loads(text)
        fields = tuple(
            FieldSpec(
                name=f["name"],
                kind=f["kind"],
                vocab=tuple(f["vocab"]),
                lo=f["lo"],
                hi=f["hi"],
            )
            for f in payload["fields"]
        )
        return FeatureSchema(fields=fields)

    def hash_hex(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


@dataclass(slots=True)
class EncodedExample:
    """One interaction under a schema.

    `values` holds one payload per schema field, in schema order:
    an int index for categorical, a sorted tuple of indices for
    multi-categorical (never empty), a float in [0,1] for continuous.
    """

    values: tuple
    label: int


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = (0.8, 0.1, 0.1)


# ---------------------------------------------------------------------------
# raw file parsing


def _read_lines(path, encoding="latin-1"):
    with open(path, "r", encoding=encoding) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line:
                yield line_no, line


def parse_movielens(ratings_path, users_path, movies_path) -> list:
    """Join MovieLens-1M rating, user, and movie files into interaction records.

    One record per rating line, in file order, carrying the user's gender,
    age bucket and occupation plus the movie's genre set.
    """
    users = {}
    for line_no, line in _read_lines(users_path):
        parts = line.split("::")
        if len(parts) != 5:
            raise ParseError(f"{users_path}:{line_no}: expected 5 '::' fields, got {len(parts)}")
        try:
            uid = int(parts[0])
            age = int(parts[2])
            occupation = int(parts[3])
        except ValueError as exc:
            raise ParseError(f"{users_path}:{line_no}: non-integer id field: {exc}") from None
        users[uid] = (parts[1], age, occupation)

    movies = {}
    for line_no, line in _read_lines(movies_path):
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(f"{movies_path}:{line_no}: expected 3 '::' fields, got {len(parts)}")
        try:
            mid = int(parts[0])
        except ValueError:
            raise ParseError(f"{movies_path}:{line_no}: non-integer movie id {parts[0]!r}") from None
        genres = tuple(g for g in parts[2].split("|") if g)
        movies[mid] = genres

    records = []
    for line_no, line in _read_lines(ratings_path):
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"{ratings_path}:{line_no}: expected 4 '::' fields, got {len(parts)}")
        try:
            uid, mid, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"{ratings_path}:{line_no}: non-integer field in {line!r}") from None
        if uid not in users:
            raise ReferentialError(f"{ratings_path}:{line_no}: unknown user id {uid}")
        if mid not in movies:
            raise ReferentialError(f"{ratings_path}:{line_no}: unknown movie id {mid}")
        gender, age, occupation = users[uid]
        records.append(
            {
                "user_id": uid,
                "movie_id": mid,
                "rating": rating,
                "timestamp": ts,
                "gender": gender,
                "age": age,
                "occupation": occupation,
                "genres": movies[mid],
            }
        )
    return records


def parse_amazon(reviews_path) -> list:
    """Parse a newline-delimited Amazon review dump into interaction records.

    Product categories (flat "category" list or nested "categories" list of
    paths) become the record's multi-valued field.
    """
    records = []
    for line_no, line in _read_lines(reviews_path, encoding="utf-8"):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{reviews_path}:{line_no}: invalid JSON: {exc}") from None
        for key in ("reviewerID", "asin", "overall", "unixReviewTime"):
            if key not in obj:
                raise ParseError(f"{reviews_path}:{line_no}: missing field {key!r}")
        rating = obj["overall"]
        if not isinstance(rating, (int, float)) or float(rating) != int(rating):
            raise ParseError(f"{reviews_path}:{line_no}: non-integral rating {rating!r}")
        categories = obj.get("category", obj.get("categories", []))
        if categories and isinstance(categories[0], list):
            categories = [c for path in categories for c in path]
        records.append(
            {
                "reviewer_id": str(obj["reviewerID"]),
                "product_id": str(obj["asin"]),
                "rating": int(rating),
                "timestamp": int(obj["unixReviewTime"]),
                "category": tuple(str(c) for c in categories),
            }
        )
    return records


def binarize_label(rating: int) -> int:
    """Map a 1..5 star rating to the binary target: >= 4 stars is positive."""
    if not 1 <= rating <= 5:
        raise DomainError(f"rating {rating} outside [1, 5]")
    return 1 if rating >= 4 else 0


# ---------------------------------------------------------------------------
# schema building and encoding

# Field plans: (name, kind) in the fixed order used by both corpora.  Zip
# codes are deliberately excluded (near-unique noise); the timestamp serves
# as the one continuous field.
_MOVIELENS_PLAN = (
    ("user_id", CATEGORICAL),
    ("movie_id", CATEGORICAL),
    ("gender", CATEGORICAL),
    ("age", CATEGORICAL),
    ("occupation", CATEGORICAL),
    ("genres", MULTI_CATEGORICAL),
    ("timestamp", CONTINUOUS),
)

_AMAZON_PLAN = (
    ("reviewer_id", CATEGORICAL),
    ("product_id", CATEGORICAL),
    ("category", MULTI_CATEGORICAL),
    ("timestamp", CONTINUOUS),
)


def _plan_for(table) -> tuple:
    keys = set(table[0].keys())
    if "movie_id" in keys:
        return _MOVIELENS_PLAN
    if "product_id" in keys:
        return _AMAZON_PLAN
    raise DomainError(f"unrecognized record layout: {sorted(keys)}")


def build_schema(table) -> FeatureSchema:
    """Fit vocabularies and normalization bounds on `table` (training rows only)."""
    if not table:
        raise DomainError("cannot build a schema from an empty table")
    plan = _plan_for(table)
    fields = []
    for name, kind in plan:
        if kind == CATEGORICAL:
            vocab = tuple(sorted({row[name] for row in table}))
            fields.append(FieldSpec(name=name, kind=kind, vocab=vocab))
        elif kind == MULTI_CATEGORICAL:
            vocab = tuple(sorted({v for row in table for v in row[name]}))
            fields.append(FieldSpec(name=name, kind=kind, vocab=vocab))
        else:
            values = [float(row[name]) for row in table]
            lo, hi = min(values), max(values)
            fields.append(FieldSpec(name=name, kind=kind, lo=lo, hi=hi))
    return FeatureSchema(fields=tuple(fields))


def encode_example(row, schema: FeatureSchema) -> EncodedExample:
    """Encode one raw record; out-of-vocabulary values land on index 0."""
    values = []
    for spec in schema.fields:
        if spec.kind == CATEGORICAL:
            values.append(spec.index_of(row[spec.name]))
        elif spec.kind == MULTI_CATEGORICAL:
            indices = sorted({spec.index_of(v) for v in row[spec.name]})
            if not indices:
                indices = [0]
            values.append(tuple(indices))
        else:
            span = spec.hi - spec.lo
            x = 0.0 if span == 0 else (float(row[spec.name]) - spec.lo) / span
            values.append(min(max(x, 0.0), 1.0))
    return EncodedExample(values=tuple(values), label=binarize_label(row["rating"]))


def decode_example(example: EncodedExample, schema: FeatureSchema) -> dict:
    """Recover raw values from an encoded example (None for reserved indices)."""
    out = {}
    for spec, payload in zip(schema.fields, example.values):
        if spec.kind == CATEGORICAL:
            out[spec.name] = spec.value_of(payload)
        elif spec.kind == MULTI_CATEGORICAL:
            out[spec.name] = tuple(spec.value_of(i) for i in payload)
        else:
            out[spec.name] = spec.lo + payload * (spec.hi - spec.lo)
    return out


def validate_example(example: EncodedExample, schema: FeatureSchema):
    """Raise EncodingError unless `example` conforms to `schema`."""
    if len(example.values) != schema.n_fields:
        raise EncodingError(
            f"example has {len(example.values)} fields, schema has {schema.n_fields}"
        )
    for spec, payload in zip(schema.fields, example.values):
        if spec.kind == CATEGORICAL:
            if not 0 <= payload < spec.cardinality:
                raise EncodingError(
                    f"{spec.name}: index {payload} outside [0, {spec.cardinality})"
                )
        elif spec.kind == MULTI_CATEGORICAL:
            if len(payload) < 1:
                raise EncodingError(f"{spec.name}: multi-valued field with no indices")
            for idx in payload:
                if not 0 <= idx < spec.cardinality:
                    raise EncodingError(
                        f"{spec.name}: index {idx} outside [0, {spec.cardinality})"
                    )
        else:
            if not 0.0 <= payload <= 1.0:
                raise EncodingError(f"{spec.name}: value {payload} outside [0, 1]")
    if example.label not in (0, 1):
        raise EncodingError(f"label {example.label} is not binary")


# ---------------------------------------------------------------------------
# splitting


def split(table, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Seeded uniform shuffle followed by a contiguous three-way cut."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios {ratios} sum to {sum(ratios)}, expected 1")
    n = len(table)
    order = Rng(seed).permutation(n)
    c1 = int(round(n * ratios[0]))
    c2 = int(round(n * (ratios[0] + ratios[1])))
    pick = lambda idx: [table[i] for i in idx]
    return DatasetSplit(
        train=pick(order[:c1]),
        validation=pick(order[c1:c2]),
        test=pick(order[c2:]),
        seed=seed,
        ratios=tuple(ratios),
    )


# ---------------------------------------------------------------------------
# binary dataset cache


@dataclass
class CachedDataset:
    schema: FeatureSchema
    tag: str
    split: DatasetSplit  # of EncodedExample

    @property
    def schema_hash(self) -> str:
        return self.schema.hash_hex()


def _pack_examples(examples, schema, out: bytearray):
    out += struct.pack("<Q", len(examples))
    kinds = [f.kind for f in schema.fields]
    for ex in examples:
        for kind, payload in zip(kinds, ex.values):
            if kind == CATEGORICAL:
                out += struct.pack("<I", payload)
            elif kind == MULTI_CATEGORICAL:
                out += struct.pack("<H", len(payload))
                out += struct.pack(f"<{len(payload)}I", *payload)
            else:
                out += struct.pack("<d", payload)
        out += struct.pack("<B", ex.label)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise CacheError("truncated cache file")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise CacheError("truncated cache file")
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk


def _unpack_examples(rd: _Reader, schema) -> list:
    (count,) = rd.take("<Q")
    kinds = [f.kind for f in schema.fields]
    examples = []
    for _ in range(count):
        values = []
        for kind in kinds:
            if kind == CATEGORICAL:
                values.append(rd.take("<I")[0])
            elif kind == MULTI_CATEGORICAL:
                (q,) = rd.take("<H")
                values.append(rd.take(f"<{q}I"))
            else:
                values.append(rd.take("<d")[0])
        (label,) = rd.take("<B")
        examples.append(EncodedExample(values=tuple(values), label=label))
    return examples


def save_cache(path, cached: CachedDataset):
    """Write the versioned binary cache; byte-identical for identical inputs."""
    schema_json = cached.schema.to_json().encode("utf-8")
    out = bytearray()
    out += CACHE_MAGIC
    out += struct.pack("<I", CACHE_VERSION)
    out += hashlib.sha256(schema_json).digest()
    out += struct.pack("<Q", len(schema_json))
    out += schema_json
    tag = cached.tag.encode("utf-8")
    out += struct.pack("<H", len(tag))
    out += tag
    sp = cached.split
    out += struct.pack("<Q", sp.seed)
    out += struct.pack("<3d", *sp.ratios)
    for part in (sp.train, sp.validation, sp.test):
        _pack_examples(part, cached.schema, out)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_cache(path) -> CachedDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    if rd.take_bytes(len(CACHE_MAGIC)) != CACHE_MAGIC:
        raise CacheError(f"{path}: not a dataset cache (bad magic)")
    (version,) = rd.take("<I")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    stored_hash = rd.take_bytes(32)
    (schema_len,) = rd.take("<Q")
    schema_json = rd.take_bytes(schema_len)
    if hashlib.sha256(schema_json).digest() != stored_hash:
        raise CacheError(f"{path}: schema hash mismatch, cache is corrupt or stale")
    schema = FeatureSchema.from_json(schema_json.decode("utf-8"))
    (tag_len,) = rd.take("<H")
    tag = rd.take_bytes(tag_len).decode("utf-8")
    (seed,) = rd.take("<Q")
    ratios = rd.take("<3d")
    parts = [_unpack_examples(rd, schema) for _ in range(3)]
    split_ = DatasetSplit(
        train=parts[0], validation=parts[1], test=parts[2], seed=seed, ratios=ratios
    )
    return CachedDataset(schema=schema, tag=tag, split=split_)


def prepare_dataset(records, ratios, seed: int, tag: str) -> CachedDataset:
    """Split raw records, fit the schema on the training part, encode everything."""
    if not records:
        raise DomainError("no interactions to prepare")
    raw_split = split(records, ratios=ratios, seed=seed)
    schema = build_schema(raw_split.train)
    encode = lambda rows: [encode_example(r, schema) for r in rows]
    enc_split = DatasetSplit(
        train=encode(raw_split.train),
        validation=encode(raw_split.validation),
        test=encode(raw_split.test),
        seed=seed,
        ratios=tuple(ratios),
    )
    return CachedDataset(schema=schema, tag=tag, split=enc_split)
