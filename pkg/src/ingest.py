"""
Event-sequence data model, CSV ingestion and the synthetic lifestream generator.

A dataset is a list of EventSequence objects, one per person. Sequences are
stored column-wise (one numpy array per attribute) and keep raw tokens; the
Vocabulary turns them into EncodedSequence objects holding integer category
indices and transformed numerical values, which is what the encoder consumes.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
import pandas as pd

from errors import ConfigError, DatasetError, RowError, SchemaError
from utils.custom_logger import log

SECONDS_PER_DAY = 86_400

# Attributes derived from the time column when a sequence is indexed
WEEKDAY_FIELD = "weekday"
DELTA_FIELD = "time_delta"
WEEKDAY_CARDINALITY = 8  # unknown + 7 days

UNKNOWN_INDEX = 0


@dataclass(frozen=True)
class CategoricalField:
    name: str
    cardinality: int | None = None  # None means inferred from the data


@dataclass(frozen=True)
class NumericalField:
    name: str
    log1p: bool = False


@dataclass
class Schema:
    """Column roles of a dataset CSV."""

    id_field: str
    time_field: str
    categorical_fields: list[CategoricalField] = field(default_factory=list)
    numerical_fields: list[NumericalField] = field(default_factory=list)
    label_field: str | None = None

    def __post_init__(self):
        if not self.categorical_fields and not self.numerical_fields:
            raise SchemaError("schema needs at least one categorical or numerical field")
        names = self.all_columns()
        duplicates = {n for n in names if names.count(n) > 1}
        if duplicates:
            raise SchemaError(f"duplicate field names: {sorted(duplicates)}")
        reserved = {WEEKDAY_FIELD, DELTA_FIELD} & set(self.attribute_names())
        if reserved:
            raise SchemaError(f"field names reserved for derived attributes: {reserved}")
        for f in self.categorical_fields:
            if f.cardinality is not None and f.cardinality < 1:
                raise SchemaError(f"cardinality of {f.name!r} must be >= 1")

    def attribute_names(self) -> list[str]:
        return [f.name for f in self.categorical_fields] + [
            f.name for f in self.numerical_fields
        ]

    def all_columns(self) -> list[str]:
        columns = [self.id_field, self.time_field]
        if self.label_field:
            columns.append(self.label_field)
        return columns + self.attribute_names()

    def to_dict(self) -> dict[str, Any]:
        categorical: list[Any] = []
        for f in self.categorical_fields:
            if f.cardinality is None:
                categorical.append(f.name)
            else:
                categorical.append({"name": f.name, "cardinality": f.cardinality})
        return {
            "id": self.id_field,
            "time": self.time_field,
            "label": self.label_field,
            "categorical": categorical,
            "numerical": [{"name": f.name, "log1p": f.log1p} for f in self.numerical_fields],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Schema":
        unknown = set(data) - {"id", "time", "label", "categorical", "numerical"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        try:
            categorical = []
            for entry in data.get("categorical", []):
                if isinstance(entry, str):
                    categorical.append(CategoricalField(entry))
                else:
                    categorical.append(
                        CategoricalField(entry["name"], entry.get("cardinality"))
                    )
            numerical = [
                NumericalField(entry["name"], bool(entry.get("log1p", False)))
                for entry in data.get("numerical", [])
            ]
            return cls(
                id_field=data["id"],
                time_field=data["time"],
                categorical_fields=categorical,
                numerical_fields=numerical,
                label_field=data.get("label"),
            )
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed schema: {e}") from e


def load_schema(path: str) -> Schema:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"schema file {path} is not valid JSON: {e}") from e
    return Schema.from_dict(data)


def save_schema(path: str, schema: Schema):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(schema.to_dict(), f, indent=2)


@dataclass
class Event:
    """One row of a sequence."""

    time: int
    categoricals: dict[str, Any]
    numericals: dict[str, float]


@dataclass(eq=False)
class EventSequence:
    """One person's events, sorted by time, stored column-wise."""

    person_id: str
    times: np.ndarray  # int64 epoch seconds
    categoricals: dict[str, np.ndarray]  # raw tokens
    numericals: dict[str, np.ndarray]  # raw float values
    label: int | None = None

    def __len__(self) -> int:
        return len(self.times)

    def take(self, indices: np.ndarray) -> "EventSequence":
        return EventSequence(
            person_id=self.person_id,
            times=self.times[indices],
            categoricals={k: v[indices] for k, v in self.categoricals.items()},
            numericals={k: v[indices] for k, v in self.numericals.items()},
            label=self.label,
        )

    @property
    def events(self) -> list[Event]:
        return list(self.iter_events())

    def iter_events(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(
                time=int(self.times[i]),
                categoricals={k: v[i] for k, v in self.categoricals.items()},
                numericals={k: float(v[i]) for k, v in self.numericals.items()},
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.person_id == other.person_id
            and self.label == other.label
            and np.array_equal(self.times, other.times)
            and self.categoricals.keys() == other.categoricals.keys()
            and self.numericals.keys() == other.numericals.keys()
            and all(
                np.array_equal(v, other.categoricals[k])
                for k, v in self.categoricals.items()
            )
            and all(
                np.array_equal(v, other.numericals[k]) for k, v in self.numericals.items()
            )
        )


@dataclass(eq=False)
class EncodedSequence:
    """A sequence indexed against a Vocabulary, ready for the encoder."""

    person_id: str
    times: np.ndarray
    categorical: np.ndarray  # int64 [T x n_categorical]
    numerical: np.ndarray  # float64 [T x n_numerical]
    label: int | None = None

    def __len__(self) -> int:
        return len(self.times)

    def take(self, indices: np.ndarray) -> "EncodedSequence":
        return EncodedSequence(
            person_id=self.person_id,
            times=self.times[indices],
            categorical=self.categorical[indices],
            numerical=self.numerical[indices],
            label=self.label,
        )

    def tail(self, length: int) -> "EncodedSequence":
        if len(self) <= length:
            return self
        return self.take(np.arange(len(self) - length, len(self)))


def _parse_times(column: pd.Series, time_field: str) -> np.ndarray:
    """Epoch seconds or ISO-8601 date-times, converted to int64 seconds."""
    numeric = pd.to_numeric(column, errors="coerce")
    times = np.floor(numeric.to_numpy(dtype=np.float64))
    missing = np.isnan(times)
    if missing.any():
        parsed = pd.to_datetime(column[missing], errors="coerce", utc=True)
        bad = parsed.isna().to_numpy()
        if bad.any():
            row = int(np.flatnonzero(missing)[np.argmax(bad)])
            raise RowError(row + 2, f"cannot parse {time_field}={column.iloc[row]!r}")
        epoch = pd.Timestamp("1970-01-01", tz="UTC")
        seconds = ((parsed - epoch) // pd.Timedelta(seconds=1)).to_numpy(dtype=np.float64)
        times[missing] = seconds
    if not np.isfinite(times).all():
        row = int(np.argmax(~np.isfinite(times)))
        raise RowError(row + 2, f"time value {column.iloc[row]!r} is not finite")
    return times.astype(np.int64)


def _parse_numbers(column: pd.Series, name: str) -> np.ndarray:
    values = pd.to_numeric(column, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argmax(bad))
        raise RowError(row + 2, f"cannot parse {name}={column.iloc[row]!r} as a number")
    return values


def _parse_labels(column: pd.Series, name: str) -> list[int | None]:
    labels: list[int | None] = []
    for row, raw in enumerate(column):
        if raw == "":
            labels.append(None)
            continue
        try:
            labels.append(int(float(raw)))
        except (ValueError, OverflowError):
            raise RowError(row + 2, f"cannot parse {name}={raw!r} as a class label")
    return labels


def load_dataset(path: str, schema: Schema, allow_empty: bool = False) -> list[EventSequence]:
    """
    Read a dataset CSV into one EventSequence per person id.

    Row numbers in errors are file line numbers (the header is line 1). Persons
    keep the order of their first appearance in the file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    log.debug(f"Loading dataset from {path}")
    try:
        # Everything is read as text; "NA" and friends are valid tokens
        df = pd.read_csv(path, dtype=str, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DatasetError(f"dataset file {path} is empty")

    missing = [c for c in schema.all_columns() if c not in df.columns]
    if missing:
        raise SchemaError(f"dataset {path} is missing declared columns: {missing}")
    if df.empty:
        if allow_empty:
            return []
        raise DatasetError(f"dataset file {path} has no rows")

    times = _parse_times(df[schema.time_field], schema.time_field)
    numericals = {f.name: _parse_numbers(df[f.name], f.name) for f in schema.numerical_fields}
    categoricals = {f.name: df[f.name].to_numpy(dtype=object) for f in schema.categorical_fields}
    labels = None
    if schema.label_field:
        labels = _parse_labels(df[schema.label_field], schema.label_field)

    ids = df[schema.id_field].to_numpy(dtype=object)
    dataset = []
    for person_id, rows in pd.Series(np.arange(len(df))).groupby(ids, sort=False):
        rows = rows.to_numpy()
        order = rows[np.argsort(times[rows], kind="stable")]
        label = None
        if labels is not None:
            person_labels = {labels[r] for r in rows if labels[r] is not None}
            if len(person_labels) > 1:
                raise DatasetError(f"person {person_id!r} has conflicting labels {person_labels}")
            label = person_labels.pop() if person_labels else None
        dataset.append(
            EventSequence(
                person_id=str(person_id),
                times=times[order],
                categoricals={k: v[order] for k, v in categoricals.items()},
                numericals={k: v[order] for k, v in numericals.items()},
                label=label,
            )
        )
    log.info(f"Loaded {len(df)} events for {len(dataset)} persons from {path}")
    return dataset


def save_dataset(path: str, dataset: list[EventSequence], schema: Schema):
    """Write a dataset in the CSV layout read by `load_dataset`."""
    frames = []
    for seq in dataset:
        columns: dict[str, Any] = {
            schema.id_field: [seq.person_id] * len(seq),
            schema.time_field: seq.times,
        }
        if schema.label_field:
            columns[schema.label_field] = ["" if seq.label is None else seq.label] * len(seq)
        for f in schema.categorical_fields:
            columns[f.name] = seq.categoricals[f.name]
        for f in schema.numerical_fields:
            columns[f.name] = seq.numericals[f.name]
        frames.append(pd.DataFrame(columns))
    if frames:
        df = pd.concat(frames, ignore_index=True)
    else:
        df = pd.DataFrame(columns=schema.all_columns())
    df.to_csv(path, index=False, columns=schema.all_columns())
    log.debug(f"Wrote {len(df)} events to {path}")


def signed_log1p(values: np.ndarray) -> np.ndarray:
    # Refunds and other negative amounts keep their sign
    return np.sign(values) * np.log1p(np.abs(values))


def weekday_index(times: np.ndarray) -> np.ndarray:
    """Weekday of epoch seconds, Monday = 1 ... Sunday = 7 (0 stays unknown)."""
    return ((times // SECONDS_PER_DAY) + 3) % 7 + 1


def log_time_delta(times: np.ndarray, previous_time: int | None = None) -> np.ndarray:
    start = times[0] if previous_time is None else previous_time
    deltas = np.diff(times, prepend=start).astype(np.float64)
    return np.log1p(np.maximum(deltas, 0.0))


@dataclass
class FeatureLayout:
    """Column order and sizes of an encoded event, derived attributes last."""

    categorical: list[tuple[str, int]]
    numerical: list[str]
    numerical_mean: list[float]
    numerical_var: list[float]


@dataclass
class Vocabulary:
    """Token indices per categorical field and running statistics per numerical field."""

    tokens: dict[str, dict[str, int]]
    cardinalities: dict[str, int]
    log1p: dict[str, bool]
    numerical_mean: dict[str, float]
    numerical_var: dict[str, float]

    def index(self, field_name: str, token: Any) -> int:
        return self.tokens[field_name].get(str(token), UNKNOWN_INDEX)

    def feature_layout(self) -> FeatureLayout:
        categorical = [(name, self.cardinalities[name]) for name in self.tokens]
        categorical.append((WEEKDAY_FIELD, WEEKDAY_CARDINALITY))
        numerical = list(self.log1p) + [DELTA_FIELD]
        return FeatureLayout(
            categorical=categorical,
            numerical=numerical,
            numerical_mean=[self.numerical_mean[n] for n in numerical],
            numerical_var=[self.numerical_var[n] for n in numerical],
        )

    def _transformed(
        self, seq: EventSequence, previous_time: int | None = None
    ) -> dict[str, np.ndarray]:
        columns = {}
        for name, flagged in self.log1p.items():
            values = seq.numericals[name].astype(np.float64)
            columns[name] = signed_log1p(values) if flagged else values
        columns[DELTA_FIELD] = log_time_delta(seq.times, previous_time)
        return columns

    def encode(self, seq: EventSequence, previous_time: int | None = None) -> EncodedSequence:
        """
        Index a sequence. `previous_time` is the time of the event preceding
        this sequence (used when appending events to an existing history).
        """
        categorical = np.empty((len(seq), len(self.tokens) + 1), dtype=np.int64)
        for col, (name, mapping) in enumerate(self.tokens.items()):
            raw = seq.categoricals[name]
            categorical[:, col] = [mapping.get(str(t), UNKNOWN_INDEX) for t in raw]
        categorical[:, -1] = weekday_index(seq.times)
        columns = self._transformed(seq, previous_time)
        numerical = np.stack([columns[n] for n in self.feature_layout().numerical], axis=1)
        return EncodedSequence(
            person_id=seq.person_id,
            times=seq.times,
            categorical=categorical,
            numerical=numerical,
            label=seq.label,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "tokens": self.tokens,
            "cardinalities": self.cardinalities,
            "log1p": self.log1p,
            "numerical_mean": self.numerical_mean,
            "numerical_var": self.numerical_var,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Vocabulary":
        return cls(**data)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_vocabulary(dataset: list[EventSequence], schema: Schema) -> Vocabulary:
    if not dataset:
        raise DatasetError("cannot build a vocabulary from an empty dataset")

    tokens: dict[str, dict[str, int]] = {}
    cardinalities: dict[str, int] = {}
    for f in schema.categorical_fields:
        observed = sorted({str(t) for seq in dataset for t in seq.categoricals[f.name]})
        tokens[f.name] = {t: i + 1 for i, t in enumerate(observed)}
        inferred = len(observed) + 1
        if f.cardinality is not None and f.cardinality < inferred:
            raise SchemaError(
                f"field {f.name!r} declares cardinality {f.cardinality} "
                f"but {len(observed)} distinct tokens were observed"
            )
        cardinalities[f.name] = f.cardinality or inferred

    vocab = Vocabulary(
        tokens=tokens,
        cardinalities=cardinalities,
        log1p={f.name: f.log1p for f in schema.numerical_fields},
        numerical_mean={},
        numerical_var={},
    )

    # Statistics of the values the encoder will see, after log1p
    columns: dict[str, list[np.ndarray]] = {}
    for seq in dataset:
        for name, values in vocab._transformed(seq).items():
            columns.setdefault(name, []).append(values)
    for name, parts in columns.items():
        values = np.concatenate(parts)
        vocab.numerical_mean[name] = float(values.mean())
        vocab.numerical_var[name] = float(values.var())

    log.debug(f"Vocabulary cardinalities: {cardinalities}")
    return vocab


def split_persons(
    dataset: list, fraction: float, rng: np.random.Generator
) -> tuple[list, list]:
    """Split persons (never events) into (kept, held_out)."""
    n_held = int(round(fraction * len(dataset)))
    order = rng.permutation(len(dataset))
    held = sorted(order[:n_held])
    kept = sorted(order[n_held:])
    return [dataset[i] for i in kept], [dataset[i] for i in held]


@dataclass
class SynthConfig:
    n_persons: int = 200
    n_classes: int = 4
    events_per_person: tuple[int, int] = (30, 80)
    n_categories: int = 20
    class_signal_strength: float = 0.8
    seed: int = 7

    def __post_init__(self):
        self.events_per_person = tuple(self.events_per_person)  # type: ignore[assignment]
        low, high = self.events_per_person
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_persons < 1:
            raise ConfigError(f"n_persons must be >= 1, got {self.n_persons}")
        if not 1 <= low <= high:
            raise ConfigError(f"events_per_person must satisfy 1 <= min <= max, got {low}, {high}")
        if self.n_categories < 1:
            raise ConfigError(f"n_categories must be >= 1, got {self.n_categories}")
        if not 0.0 <= self.class_signal_strength <= 1.0:
            raise ConfigError(
                f"class_signal_strength must be in [0, 1], got {self.class_signal_strength}"
            )


SYNTH_START_TIME = 1_577_836_800  # 2020-01-01
PERSON_CONCENTRATION = 40.0


def synthetic_schema() -> Schema:
    return Schema(
        id_field="person_id",
        time_field="time",
        label_field="label",
        categorical_fields=[CategoricalField("mcc")],
        numerical_fields=[NumericalField("amount", log1p=True)],
    )


def generate_synthetic(config: SynthConfig) -> list[EventSequence]:
    """
    Generate labelled lifestreams whose category mix and spending level depend
    on the class. Each class draws merchant categories from a mix of a shared
    base distribution and a class-specific one, weighted by the signal
    strength; each person then perturbs their class distribution.
    """
    rng = np.random.default_rng(config.seed)
    s = config.class_signal_strength
    k = config.n_categories

    base = rng.dirichlet(np.ones(k))
    specific = rng.dirichlet(np.full(k, 0.3), size=config.n_classes)
    class_mix = (1.0 - s) * base + s * specific
    class_amount = 3.0 + s * rng.normal(0.0, 1.0, size=config.n_classes)
    tokens = np.array([f"m{i:03d}" for i in range(k)], dtype=object)

    low, high = config.events_per_person
    dataset = []
    for i in range(config.n_persons):
        label = i % config.n_classes
        mix = rng.dirichlet(PERSON_CONCENTRATION * class_mix[label] + 1e-3)
        amount_level = class_amount[label] + rng.normal(0.0, 0.3)

        n_events = int(rng.integers(low, high + 1))
        start = SYNTH_START_TIME + int(rng.integers(0, 30 * SECONDS_PER_DAY))
        gaps = rng.exponential(SECONDS_PER_DAY / 2, size=n_events).astype(np.int64)
        times = start + np.cumsum(gaps) - gaps[0]
        categories = rng.choice(k, size=n_events, p=mix)
        amounts = np.round(rng.lognormal(amount_level, 0.5, size=n_events), 2)

        dataset.append(
            EventSequence(
                person_id=f"p{i:05d}",
                times=times.astype(np.int64),
                categoricals={"mcc": tokens[categories]},
                numericals={"amount": amounts},
                label=label,
            )
        )
    log.debug(f"Generated {len(dataset)} synthetic persons ({config.n_classes} classes, {s=})")
    return dataset

