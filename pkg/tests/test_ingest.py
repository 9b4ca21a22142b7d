import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from errors import ConfigError, DatasetError, RowError, SchemaError
from ingest import (
    DELTA_FIELD,
    UNKNOWN_INDEX,
    WEEKDAY_FIELD,
    CategoricalField,
    EventSequence,
    NumericalField,
    Schema,
    SynthConfig,
    build_vocabulary,
    generate_synthetic,
    load_dataset,
    load_schema,
    log_time_delta,
    save_dataset,
    save_schema,
    signed_log1p,
    split_persons,
    weekday_index,
)

SCHEMA = Schema(
    id_field="client",
    time_field="ts",
    label_field="target",
    categorical_fields=[CategoricalField("mcc")],
    numerical_fields=[NumericalField("amount", log1p=True)],
)


def write(tmp_path, text, name="events.csv"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_groups_and_sorts(tmp_path):
    path = write(
        tmp_path,
        "client,ts,target,mcc,amount\n"
        "b,300,1,x,1.5\n"
        "a,200,0,y,2.0\n"
        "b,100,1,z,3.0\n"
        "b,300,1,w,4.0\n",
    )
    dataset = load_dataset(path, SCHEMA)
    assert [s.person_id for s in dataset] == ["b", "a"]
    b = dataset[0]
    assert_array_equal(b.times, [100, 300, 300])
    # equal times keep file order
    assert_array_equal(b.categoricals["mcc"], ["z", "x", "w"])
    assert_allclose(b.numericals["amount"], [3.0, 1.5, 4.0])
    assert b.label == 1 and dataset[1].label == 0


def test_iso_times_and_missing_labels(tmp_path):
    path = write(
        tmp_path,
        "client,ts,target,mcc,amount\n"
        "a,2020-01-01T00:00:00Z,,NA,1\n"
        "a,2020-01-02T00:00:00Z,,NA,1\n",
    )
    (seq,) = load_dataset(path, SCHEMA)
    assert_array_equal(seq.times, [1_577_836_800, 1_577_923_200])
    assert seq.label is None
    # NA is an ordinary token, not a missing value
    assert_array_equal(seq.categoricals["mcc"], ["NA", "NA"])


def test_row_errors_carry_line_numbers(tmp_path):
    path = write(tmp_path, "client,ts,target,mcc,amount\na,1,0,x,1\na,2,0,x,oops\n")
    with pytest.raises(RowError) as excinfo:
        load_dataset(path, SCHEMA)
    assert excinfo.value.row == 3

    path = write(tmp_path, "client,ts,target,mcc,amount\na,not-a-time,0,x,1\n", "bad_time.csv")
    with pytest.raises(RowError) as excinfo:
        load_dataset(path, SCHEMA)
    assert excinfo.value.row == 2


@pytest.mark.parametrize("label", ["inf", "-inf", "1e999", "nan", "x"])
def test_unparseable_labels_are_row_errors(tmp_path, label):
    path = write(tmp_path, f"client,ts,target,mcc,amount\na,1,0,x,1\nb,2,{label},x,1\n")
    with pytest.raises(RowError, match="class label") as excinfo:
        load_dataset(path, SCHEMA)
    assert excinfo.value.row == 3


def test_dataset_errors(tmp_path):
    with pytest.raises(SchemaError, match="amount"):
        load_dataset(write(tmp_path, "client,ts,target,mcc\na,1,0,x\n"), SCHEMA)
    with pytest.raises(DatasetError):
        load_dataset(write(tmp_path, "client,ts,target,mcc,amount\n", "empty.csv"), SCHEMA)
    assert load_dataset(str(tmp_path / "empty.csv"), SCHEMA, allow_empty=True) == []
    with pytest.raises(DatasetError, match="conflicting"):
        load_dataset(
            write(tmp_path, "client,ts,target,mcc,amount\na,1,0,x,1\na,2,1,x,1\n", "c.csv"),
            SCHEMA,
        )
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path / "missing.csv"), SCHEMA)


def test_schema_round_trip_and_validation(tmp_path):
    schema = Schema(
        id_field="id",
        time_field="t",
        categorical_fields=[CategoricalField("a", cardinality=10), CategoricalField("b")],
        numerical_fields=[NumericalField("x")],
    )
    path = str(tmp_path / "schema.json")
    save_schema(path, schema)
    assert load_schema(path) == schema

    with pytest.raises(SchemaError):
        Schema("id", "t")
    with pytest.raises(SchemaError):
        Schema(
            "id",
            "t",
            categorical_fields=[CategoricalField("x")],
            numerical_fields=[NumericalField("x")],
        )
    with pytest.raises(SchemaError):
        Schema("id", "t", categorical_fields=[CategoricalField(WEEKDAY_FIELD)])
    with pytest.raises(SchemaError):
        Schema.from_dict({"id": "id", "time": "t", "categorical": ["a"], "extra": 1})


def test_save_and_load_round_trip(tmp_path, small_dataset, schema):
    path = str(tmp_path / "synthetic.csv")
    save_dataset(path, small_dataset, schema)
    assert load_dataset(path, schema) == small_dataset


def test_time_features():
    # 2020-01-01 was a Wednesday
    times = np.array([1_577_836_800, 1_577_836_800 + 5 * 86_400])
    assert_array_equal(weekday_index(times), [3, 1])
    assert_allclose(log_time_delta(np.array([10, 20, 20])), [0.0, np.log1p(10), 0.0])
    deltas = log_time_delta(np.array([10, 20]), previous_time=4)
    assert_allclose(deltas, [np.log1p(6), np.log1p(10)])
    assert_allclose(signed_log1p(np.array([-np.e + 1, 0.0, np.e - 1])), [-1.0, 0.0, 1.0])


def test_vocabulary_indexes_tokens(small_dataset, schema):
    vocab = build_vocabulary(small_dataset, schema)
    tokens = sorted({t for s in small_dataset for t in s.categoricals["mcc"]})
    assert vocab.cardinalities["mcc"] == len(tokens) + 1
    assert vocab.index("mcc", tokens[0]) == 1
    assert vocab.index("mcc", "never-seen") == UNKNOWN_INDEX

    layout = vocab.feature_layout()
    assert [name for name, _ in layout.categorical] == ["mcc", WEEKDAY_FIELD]
    assert layout.numerical == ["amount", DELTA_FIELD]

    seq = small_dataset[0]
    encoded = vocab.encode(seq)
    assert encoded.categorical.shape == (len(seq), 2)
    assert encoded.numerical.shape == (len(seq), 2)
    assert_allclose(encoded.numerical[:, 0], np.log1p(seq.numericals["amount"]))
    assert encoded.numerical[0, 1] == 0.0
    assert ((encoded.categorical[:, 1] >= 1) & (encoded.categorical[:, 1] <= 7)).all()


def test_vocabulary_statistics_follow_transforms(small_dataset, schema):
    vocab = build_vocabulary(small_dataset, schema)
    amounts = np.concatenate([np.log1p(s.numericals["amount"]) for s in small_dataset])
    assert vocab.numerical_mean["amount"] == pytest.approx(amounts.mean())
    assert vocab.numerical_var["amount"] == pytest.approx(amounts.var())


def test_vocabulary_digest_is_stable(small_dataset, schema):
    first = build_vocabulary(small_dataset, schema)
    second = build_vocabulary(list(small_dataset), schema)
    assert first.digest() == second.digest()
    assert first.digest() != build_vocabulary(small_dataset[:5], schema).digest()


def test_declared_cardinality_too_small(small_dataset, schema):
    tight = Schema(
        id_field=schema.id_field,
        time_field=schema.time_field,
        categorical_fields=[CategoricalField("mcc", cardinality=2)],
        numerical_fields=schema.numerical_fields,
    )
    with pytest.raises(SchemaError):
        build_vocabulary(small_dataset, tight)


def test_encode_with_previous_time_matches_full_encode(small_dataset, schema):
    vocab = build_vocabulary(small_dataset, schema)
    seq = small_dataset[1]
    full = vocab.encode(seq)
    head = seq.take(np.arange(10))
    tail = vocab.encode(seq.take(np.arange(10, len(seq))), previous_time=int(head.times[-1]))
    start = vocab.encode(head)
    assert_array_equal(np.concatenate([start.categorical, tail.categorical]), full.categorical)
    assert_allclose(np.concatenate([start.numerical, tail.numerical]), full.numerical)


def test_split_persons_partitions(small_dataset):
    kept, held = split_persons(small_dataset, 0.25, np.random.default_rng(0))
    assert len(held) == 10 and len(kept) == 30
    ids = [s.person_id for s in kept + held]
    assert sorted(ids) == sorted(s.person_id for s in small_dataset)


def test_synthetic_generator_is_deterministic():
    config = SynthConfig(n_persons=200, n_classes=4, seed=7)
    first, second = generate_synthetic(config), generate_synthetic(config)
    assert first == second
    assert len({s.person_id for s in first}) == 200
    assert {s.label for s in first} == {0, 1, 2, 3}
    assert all(30 <= len(s) <= 80 for s in first)
    assert all((np.diff(s.times) >= 0).all() for s in first)


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(n_classes=1)
    with pytest.raises(ConfigError):
        SynthConfig(class_signal_strength=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(events_per_person=(10, 5))


def test_event_view():
    seq = EventSequence(
        person_id="p",
        times=np.array([5, 7]),
        categoricals={"mcc": np.array(["a", "b"], dtype=object)},
        numericals={"amount": np.array([1.0, 2.0])},
    )
    events = seq.events
    assert [e.time for e in events] == [5, 7]
    assert events[1].categoricals == {"mcc": "b"}
    assert events[1].numericals == {"amount": 2.0}
