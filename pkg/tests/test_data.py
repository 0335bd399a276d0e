import pytest

from arec.data import (
    CATEGORICAL,
    CONTINUOUS,
    MULTI_CATEGORICAL,
    CacheError,
    ConfigError,
    DomainError,
    EncodedExample,
    FeatureSchema,
    FieldSpec,
    ParseError,
    ReferentialError,
    binarize_label,
    build_schema,
    decode_example,
    encode_example,
    load_cache,
    parse_amazon,
    parse_movielens,
    prepare_dataset,
    save_cache,
    split,
    validate_example,
)

USERS = """1::F::1::10::48067
2::M::56::16::70072
3::M::25::15::55117
"""

MOVIES = """1193::One Flew Over the Cuckoo's Nest (1975)::Drama
661::James and the Giant Peach (1996)::Animation|Children's|Musical
914::My Fair Lady (1964)::Musical|Romance
3408::Erin Brockovich (2000)::Drama
"""

RATINGS = """1::1193::5::978300760
1::661::3::978302109
1::914::3::978301968
2::1193::4::978298413
2::3408::4::978297600
3::661::1::978298147
3::914::2::978299000
3::3408::5::978299200
1::3408::4::978301777
2::661::2::978299809
"""


@pytest.fixture
def ml_files(tmp_path):
    paths = {}
    for name, text in [("users.dat", USERS), ("movies.dat", MOVIES), ("ratings.dat", RATINGS)]:
        p = tmp_path / name
        p.write_text(text, encoding="latin-1")
        paths[name] = str(p)
    return paths


def parse_fixture(paths):
    return parse_movielens(paths["ratings.dat"], paths["users.dat"], paths["movies.dat"])


def test_movielens_first_line_transcription(ml_files):
    records = parse_fixture(ml_files)
    assert len(records) == 10
    r0 = records[0]
    assert r0["user_id"] == 1 and r0["movie_id"] == 1193
    assert r0["rating"] == 5 and r0["timestamp"] == 978300760
    assert r0["gender"] == "F" and r0["age"] == 1 and r0["occupation"] == 10
    assert r0["genres"] == ("Drama",)


def test_movielens_join_hand_transcription(ml_files):
    records = parse_fixture(ml_files)
    r5 = records[5]
    assert r5["user_id"] == 3 and r5["movie_id"] == 661 and r5["rating"] == 1
    assert r5["gender"] == "M" and r5["age"] == 25 and r5["occupation"] == 15
    assert r5["genres"] == ("Animation", "Children's", "Musical")
    # file order preserved
    assert [r["movie_id"] for r in records[:4]] == [1193, 661, 914, 1193]


def test_movielens_empty_ratings_file(ml_files, tmp_path):
    empty = tmp_path / "none.dat"
    empty.write_text("", encoding="latin-1")
    records = parse_movielens(str(empty), ml_files["users.dat"], ml_files["movies.dat"])
    assert records == []


def test_movielens_latin1_title(ml_files, tmp_path):
    movies = tmp_path / "m2.dat"
    movies.write_bytes("99::Les Mis\xe9rables (1998)::Drama\n".encode("latin-1"))
    ratings = tmp_path / "r2.dat"
    ratings.write_text("1::99::4::978300000\n", encoding="latin-1")
    records = parse_movielens(str(ratings), ml_files["users.dat"], str(movies))
    assert records[0]["movie_id"] == 99


def test_movielens_malformed_line_reports_position(ml_files, tmp_path):
    bad = tmp_path / "bad.dat"
    bad.write_text("1::1193::5::978300760\n1::661::oops\n", encoding="latin-1")
    with pytest.raises(ParseError) as err:
        parse_movielens(str(bad), ml_files["users.dat"], ml_files["movies.dat"])
    assert ":2:" in str(err.value)


def test_movielens_non_integer_field(ml_files, tmp_path):
    bad = tmp_path / "bad.dat"
    bad.write_text("1::x::5::978300760\n", encoding="latin-1")
    with pytest.raises(ParseError) as err:
        parse_movielens(str(bad), ml_files["users.dat"], ml_files["movies.dat"])
    assert ":1:" in str(err.value)


def test_movielens_unknown_ids_are_referential_errors(ml_files, tmp_path):
    bad = tmp_path / "bad.dat"
    bad.write_text("77::1193::5::978300760\n", encoding="latin-1")
    with pytest.raises(ReferentialError):
        parse_movielens(str(bad), ml_files["users.dat"], ml_files["movies.dat"])
    bad.write_text("1::4242::5::978300760\n", encoding="latin-1")
    with pytest.raises(ReferentialError):
        parse_movielens(str(bad), ml_files["users.dat"], ml_files["movies.dat"])


AMAZON_LINES = [
    '{"reviewerID": "A1", "asin": "B001", "overall": 5.0, "unixReviewTime": 1400000000, "category": ["Books", "Fiction"]}',
    '{"reviewerID": "A2", "asin": "B002", "overall": 3, "unixReviewTime": 1400000060, "category": ["Books"]}',
    '{"reviewerID": "A1", "asin": "B002", "overall": 1.0, "unixReviewTime": 1400000120, "categories": [["Books", "Mystery"]]}',
    '{"reviewerID": "A3", "asin": "B001", "overall": 4.0, "unixReviewTime": 1400000180, "category": []}',
]


@pytest.fixture
def amazon_file(tmp_path):
    p = tmp_path / "reviews.json"
    p.write_text("\n".join(AMAZON_LINES) + "\n", encoding="utf-8")
    return str(p)


def test_amazon_transcription(amazon_file):
    records = parse_amazon(amazon_file)
    assert len(records) == 4
    assert records[0] == {
        "reviewer_id": "A1",
        "product_id": "B001",
        "rating": 5,
        "timestamp": 1400000000,
        "category": ("Books", "Fiction"),
    }
    # float-typed integral rating copies through as an int
    assert records[0]["rating"] == 5 and isinstance(records[0]["rating"], int)
    # nested category paths flatten
    assert records[2]["category"] == ("Books", "Mystery")
    assert records[3]["category"] == ()


def test_amazon_missing_field_named(amazon_file, tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"reviewerID": "A1", "asin": "B9", "unixReviewTime": 1}\n')
    with pytest.raises(ParseError) as err:
        parse_amazon(str(p))
    assert "overall" in str(err.value)


def test_amazon_rejects_fractional_rating(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"reviewerID": "A1", "asin": "B9", "overall": 4.5, "unixReviewTime": 1}\n')
    with pytest.raises(ParseError):
        parse_amazon(str(p))


def test_amazon_invalid_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"reviewerID": "A1", "asin": "B9", "overall": 4, "unixReviewTime": 1}\n{nope\n')
    with pytest.raises(ParseError) as err:
        parse_amazon(str(p))
    assert ":2:" in str(err.value)


def test_binarize_label():
    assert binarize_label(5) == 1
    assert binarize_label(4) == 1
    assert binarize_label(3) == 0
    assert binarize_label(1) == 0
    for bad in (0, 6):
        with pytest.raises(DomainError):
            binarize_label(bad)


def test_build_schema_movielens_layout(ml_files):
    schema = build_schema(parse_fixture(ml_files))
    names = [f.name for f in schema.fields]
    assert names == ["user_id", "movie_id", "gender", "age", "occupation", "genres", "timestamp"]
    kinds = {f.name: f.kind for f in schema.fields}
    assert kinds["genres"] == MULTI_CATEGORICAL
    assert kinds["timestamp"] == CONTINUOUS
    assert kinds["user_id"] == CATEGORICAL
    # vocab sizes from the fixture: 3 users, 4 movies, 2 genders
    assert schema.field_named("user_id").cardinality == 4
    assert schema.field_named("movie_id").cardinality == 5
    assert schema.field_named("gender").cardinality == 3


def test_build_schema_single_user_reserved_slot():
    table = [
        {"user_id": 1, "movie_id": m, "rating": 4, "timestamp": m, "gender": "F",
         "age": 1, "occupation": 0, "genres": ("Drama",)}
        for m in (10, 11)
    ]
    schema = build_schema(table)
    assert schema.field_named("user_id").cardinality == 2


def test_build_schema_empty_table():
    with pytest.raises(DomainError):
        build_schema([])


def test_schema_rejects_duplicate_names():
    with pytest.raises(DomainError):
        FeatureSchema(fields=(
            FieldSpec(name="a", kind=CATEGORICAL, vocab=(1,)),
            FieldSpec(name="a", kind=CATEGORICAL, vocab=(2,)),
        ))


def test_continuous_field_has_no_cardinality():
    spec = FieldSpec(name="t", kind=CONTINUOUS, lo=0.0, hi=9.0)
    with pytest.raises(DomainError):
        spec.cardinality


def test_encode_decode_roundtrip(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records)
    for row in records:
        ex = encode_example(row, schema)
        validate_example(ex, schema)
        back = decode_example(ex, schema)
        for name in ("user_id", "movie_id", "gender", "age", "occupation"):
            assert back[name] == row[name]
        assert set(back["genres"]) == set(row["genres"])
        assert abs(back["timestamp"] - row["timestamp"]) < 1e-6
        assert ex.label == (1 if row["rating"] >= 4 else 0)


def test_encode_out_of_vocabulary_maps_to_zero(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records[:4])  # users {1,2}, movies {661,914,1193,3408}
    row = dict(records[0], user_id=999, genres=("Documentary",))
    ex = encode_example(row, schema)
    assert ex.values[0] == 0
    assert ex.values[5] == (0,)


def test_encode_multi_count_is_exact(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records)
    ex = encode_example(records[5], schema)  # three genres
    assert len(ex.values[5]) == 3
    assert all(i > 0 for i in ex.values[5])


def test_encode_continuous_normalized(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records)
    spec = schema.field_named("timestamp")
    ts = [r["timestamp"] for r in records]
    assert spec.lo == min(ts) and spec.hi == max(ts)
    for row in records:
        x = encode_example(row, schema).values[6]
        assert 0.0 <= x <= 1.0
    lo_row = next(r for r in records if r["timestamp"] == min(ts))
    hi_row = next(r for r in records if r["timestamp"] == max(ts))
    assert encode_example(lo_row, schema).values[6] == 0.0
    assert encode_example(hi_row, schema).values[6] == 1.0


def test_train_only_fitting(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records[:4])
    # user 3 never appears in the fitting rows
    assert schema.field_named("user_id").index_of(3) == 0
    ex = encode_example(records[5], schema)
    assert ex.values[0] == 0


def test_validate_example_errors(ml_files):
    records = parse_fixture(ml_files)
    schema = build_schema(records)
    good = encode_example(records[0], schema)
    from arec.data import EncodingError

    with pytest.raises(EncodingError):
        validate_example(EncodedExample(values=good.values[:-1], label=good.label), schema)
    bad_idx = (999,) + good.values[1:]
    with pytest.raises(EncodingError):
        validate_example(EncodedExample(values=bad_idx, label=good.label), schema)
    empty_multi = good.values[:5] + ((),) + good.values[6:]
    with pytest.raises(EncodingError):
        validate_example(EncodedExample(values=empty_multi, label=good.label), schema)
    bad_cont = good.values[:6] + (1.5,)
    with pytest.raises(EncodingError):
        validate_example(EncodedExample(values=bad_cont, label=good.label), schema)
    with pytest.raises(EncodingError):
        validate_example(EncodedExample(values=good.values, label=2), schema)


def test_split_sizes_ten_rows():
    part = split(list(range(10)), ratios=(0.8, 0.1, 0.1), seed=0)
    assert (len(part.train), len(part.validation), len(part.test)) == (8, 1, 1)
    assert sorted(part.train + part.validation + part.test) == list(range(10))


def test_split_same_seed_reproduces():
    rows = list(range(100))
    a = split(rows, seed=7)
    b = split(rows, seed=7)
    assert a.train == b.train and a.validation == b.validation and a.test == b.test


def test_split_different_seeds_differ():
    rows = list(range(1000))
    a = split(rows, seed=0)
    b = split(rows, seed=1)
    assert a.train != b.train


def test_split_partitions_are_disjoint():
    rows = list(range(57))
    part = split(rows, seed=3)
    seen = part.train + part.validation + part.test
    assert len(seen) == 57 and len(set(seen)) == 57


def test_split_ratio_validation():
    rows = list(range(10))
    with pytest.raises(ConfigError):
        split(rows, ratios=(0.8, 0.1))
    with pytest.raises(ConfigError):
        split(rows, ratios=(0.9, 0.2, -0.1))
    with pytest.raises(ConfigError):
        split(rows, ratios=(0.5, 0.2, 0.2))


def test_prepare_and_cache_roundtrip(ml_files, tmp_path):
    records = parse_fixture(ml_files)
    dataset = prepare_dataset(records, ratios=(0.8, 0.1, 0.1), seed=5, tag="fixture")
    assert dataset.tag == "fixture"
    assert len(dataset.split.train) == 8

    path = tmp_path / "data.cache"
    save_cache(str(path), dataset)
    loaded = load_cache(str(path))
    assert loaded.schema.to_json() == dataset.schema.to_json()
    assert loaded.schema_hash == dataset.schema_hash
    assert loaded.tag == "fixture"
    assert loaded.split.seed == 5
    assert tuple(loaded.split.ratios) == (0.8, 0.1, 0.1)
    assert loaded.split.train == dataset.split.train
    assert loaded.split.validation == dataset.split.validation
    assert loaded.split.test == dataset.split.test


def test_cache_write_is_deterministic(ml_files, tmp_path):
    records = parse_fixture(ml_files)
    dataset = prepare_dataset(records, ratios=(0.8, 0.1, 0.1), seed=5, tag="fixture")
    p1, p2 = tmp_path / "a.cache", tmp_path / "b.cache"
    save_cache(str(p1), dataset)
    save_cache(str(p2), dataset)
    assert p1.read_bytes() == p2.read_bytes()


def test_cache_truncation_detected(ml_files, tmp_path):
    records = parse_fixture(ml_files)
    dataset = prepare_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0, tag="t")
    path = tmp_path / "data.cache"
    save_cache(str(path), dataset)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CacheError):
        load_cache(str(path))


def test_cache_corruption_detected(ml_files, tmp_path):
    records = parse_fixture(ml_files)
    dataset = prepare_dataset(records, ratios=(0.8, 0.1, 0.1), seed=0, tag="t")
    path = tmp_path / "data.cache"
    save_cache(str(path), dataset)
    blob = bytearray(path.read_bytes())
    blob[60] ^= 0xFF  # inside the schema JSON block
    path.write_bytes(bytes(blob))
    with pytest.raises(CacheError):
        load_cache(str(path))


def test_cache_bad_magic(tmp_path):
    path = tmp_path / "junk.cache"
    path.write_bytes(b"NOPE1" + b"\x00" * 64)
    with pytest.raises(CacheError):
        load_cache(str(path))


def test_prepare_dataset_rejects_empty():
    with pytest.raises(DomainError):
        prepare_dataset([], ratios=(0.8, 0.1, 0.1), seed=0, tag="x")
