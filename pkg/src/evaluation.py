"""
Embedding export, incremental state updates and downstream quality probes.
"""
import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from checkpoint import Checkpoint, StateFile
from encoder import encode_many, incremental_update, unit_rows
from errors import CompatibilityError, DatasetError, InputError, ProbeError, ProjectionError
from ingest import EventSequence, Schema
from utils.custom_logger import log

UNIT_NORM_TOLERANCE = 1e-4
CI_Z = 1.96

LOGISTIC_L2 = 1e-3
LOGISTIC_TOL = 1e-6
LOGISTIC_MAX_ITER = 500

PCA_TOL = 1e-9
PCA_MAX_ITER = 10_000


@dataclass
class EmbeddingTable:
    person_ids: list[str]
    labels: list[int | None]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.person_ids):
            raise InputError(
                f"{len(self.person_ids)} person ids for vectors of shape {self.vectors.shape}"
            )
        if len(self.labels) != len(self.person_ids):
            raise InputError(f"{len(self.labels)} labels for {len(self.person_ids)} persons")
        if len(set(self.person_ids)) != len(self.person_ids):
            raise InputError("person ids in an embedding table must be unique")
        norms = np.sqrt((self.vectors**2).sum(axis=1))
        if len(norms) and np.abs(norms - 1.0).max() > UNIT_NORM_TOLERANCE:
            raise InputError("embedding vectors must be unit-norm")

    def __len__(self) -> int:
        return len(self.person_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def labelled(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Vectors, labels and ids of the labelled rows, sorted by person id."""
        rows = sorted(
            (pid, i) for i, pid in enumerate(self.person_ids) if self.labels[i] is not None
        )
        if not rows:
            raise ProbeError("the embedding table has no labelled rows")
        index = np.array([i for _, i in rows])
        labels = np.array([self.labels[i] for i in index], dtype=np.int64)
        return self.vectors[index], labels, [pid for pid, _ in rows]


def write_embeddings(path: str, table: EmbeddingTable):
    df = pd.DataFrame(table.vectors, columns=[f"e{i}" for i in range(table.dim)])
    df.insert(0, "label", pd.array(table.labels, dtype="Int64"))
    df.insert(0, "person_id", table.person_ids)
    df.to_csv(path, index=False, float_format="%.9g")
    log.info(f"Wrote {len(table)} embeddings of dimension {table.dim} to {path}")


def read_embeddings(path: str) -> EmbeddingTable:
    df = pd.read_csv(path, dtype={"person_id": str, "label": str}, na_filter=False)
    vector_columns = [c for c in df.columns if c.startswith("e")]
    if "person_id" not in df.columns or "label" not in df.columns or not vector_columns:
        raise DatasetError(f"{path} is not an embedding table (person_id,label,e0,...)")
    labels = [None if value == "" else int(value) for value in df["label"]]
    return EmbeddingTable(
        person_ids=df["person_id"].tolist(),
        labels=labels,
        vectors=df[vector_columns].to_numpy(dtype=np.float64),
    )


def check_schema(checkpoint: Checkpoint, schema: Schema):
    """The dataset schema must declare the fields the checkpoint was trained on."""
    trained = checkpoint.get_schema()
    for kind, ours, theirs in (
        ("categorical", trained.categorical_fields, schema.categorical_fields),
        ("numerical", trained.numerical_fields, schema.numerical_fields),
    ):
        expected = [f.name for f in ours]
        got = [f.name for f in theirs]
        if expected != got:
            raise CompatibilityError(
                f"{kind} fields {got} do not match the checkpoint's {expected}"
            )
    flags = {f.name: f.log1p for f in schema.numerical_fields}
    for f in trained.numerical_fields:
        if flags[f.name] != f.log1p:
            raise CompatibilityError(f"log1p flag of {f.name!r} differs from the checkpoint")


def export_states(
    checkpoint: Checkpoint, dataset: list[EventSequence], schema: Schema
) -> StateFile:
    """Infer-mode raw final states of every person."""
    check_schema(checkpoint, schema)
    vocabulary = checkpoint.get_vocabulary()
    params = checkpoint.encoder_params()
    states = encode_many([vocabulary.encode(seq) for seq in dataset], params)
    return StateFile(
        vocabulary_digest=vocabulary.digest(),
        hidden_size=params.hidden_size,
        states={seq.person_id: state for seq, state in zip(dataset, states)},
        last_times={seq.person_id: int(seq.times[-1]) for seq in dataset},
        labels={seq.person_id: seq.label for seq in dataset},
    )


def table_from_states(state_file: StateFile) -> EmbeddingTable:
    ids = list(state_file.states)
    if not ids:
        return EmbeddingTable([], [], np.zeros((0, state_file.hidden_size)))
    vectors = unit_rows(np.stack([state_file.states[pid] for pid in ids]).astype(np.float64))
    return EmbeddingTable(ids, [state_file.labels.get(pid) for pid in ids], vectors)


def export_embeddings(
    checkpoint: Checkpoint, dataset: list[EventSequence], schema: Schema
) -> EmbeddingTable:
    return table_from_states(export_states(checkpoint, dataset, schema))


def update_states(
    checkpoint: Checkpoint,
    state_file: StateFile,
    new_events: list[EventSequence],
    schema: Schema,
) -> StateFile:
    """
    Fold new events into stored states without re-encoding history. Persons
    without stored state start from the zero state.
    """
    check_schema(checkpoint, schema)
    vocabulary = checkpoint.get_vocabulary()
    params = checkpoint.encoder_params()
    if state_file.vocabulary_digest != vocabulary.digest():
        raise CompatibilityError(
            f"state file vocabulary {state_file.vocabulary_digest[:12]} does not match "
            f"checkpoint vocabulary {vocabulary.digest()[:12]}"
        )
    if state_file.hidden_size != params.hidden_size:
        raise CompatibilityError(
            f"state hidden size {state_file.hidden_size} does not match "
            f"checkpoint hidden size {params.hidden_size}"
        )

    states = dict(state_file.states)
    last_times = dict(state_file.last_times)
    labels = dict(state_file.labels)
    for seq in new_events:
        pid = seq.person_id
        if pid in last_times and len(seq) and seq.times[0] < last_times[pid]:
            raise InputError(f"new events of {pid!r} start before its stored history ends")
        encoded = vocabulary.encode(seq, previous_time=last_times.get(pid))
        start = states.get(pid, np.zeros(params.hidden_size))
        _, states[pid] = incremental_update(start, encoded, params)
        if len(seq):
            last_times[pid] = int(seq.times[-1])
        if seq.label is not None:
            labels[pid] = seq.label
    log.info(f"Updated {len(new_events)} persons ({len(states)} states in total)")
    return StateFile(state_file.vocabulary_digest, params.hidden_size, states, last_times, labels)


@dataclass
class ProbeReport:
    metric: str
    mean: float
    ci95: float
    folds: int
    n: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "mean": self.mean,
            "ci95": self.ci95,
            "folds": self.folds,
            "n": self.n,
        }


def report_document(reports: list[ProbeReport]) -> dict[str, Any]:
    """
    One JSON object per evaluation run: the accuracy summary at the top level and
    AUROC nested under "auroc" (null unless the labels are binary).
    """
    primary, *others = reports
    document: dict[str, Any] = dict(primary.to_dict(), auroc=None)
    for report in others:
        nested = report.to_dict()
        del nested["metric"]
        document[report.metric] = nested
    return document


def write_reports(path: str, reports: list[ProbeReport]):
    with open(path, "w") as f:
        json.dump(report_document(reports), f, indent=2)


def summarize(metric_name: str, values: list[float], n: int) -> ProbeReport:
    """Mean and 95% half-width (1.96 standard errors) over folds."""
    values_arr = np.asarray(values, dtype=np.float64)
    sd = values_arr.std(ddof=1) if len(values_arr) > 1 else 0.0
    return ProbeReport(
        metric=metric_name,
        mean=float(values_arr.mean()),
        ci95=float(CI_Z * sd / math.sqrt(len(values_arr))),
        folds=len(values_arr),
        n=n,
    )


def stratified_folds(labels: np.ndarray, folds: int) -> np.ndarray:
    """
    Fold index per row: within every class, rows (already in person-id order)
    are dealt round-robin over the folds.
    """
    if folds < 2:
        raise ProbeError(f"need at least 2 folds, got {folds}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ProbeError(f"probing needs at least 2 classes, got {classes.tolist()}")
    if counts.min() < folds:
        raise ProbeError(
            f"class {classes[counts.argmin()]} has {counts.min()} persons, fewer than {folds} folds"
        )
    assignment = np.empty(len(labels), dtype=np.int64)
    for c in classes:
        rows = np.flatnonzero(labels == c)
        assignment[rows] = np.arange(len(rows)) % folds
    return assignment


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve from the rank statistic, ties getting average ranks."""
    labels = np.asarray(labels)
    positive = labels == labels.max()
    n_pos = int(positive.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ProbeError("AUROC needs both classes present")
    ranks = pd.Series(np.asarray(scores, dtype=np.float64)).rank(method="average").to_numpy()
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    return probs / probs.sum(axis=1, keepdims=True)


@dataclass
class LogisticModel:
    weights: np.ndarray  # [(d + 1) x classes], bias row last
    mean: np.ndarray
    std: np.ndarray

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return _softmax(np.hstack([z, np.ones((len(z), 1))]) @ self.weights)


def fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    l2: float = LOGISTIC_L2,
    tol: float = LOGISTIC_TOL,
    max_iter: int = LOGISTIC_MAX_ITER,
) -> LogisticModel:
    """
    Multinomial logistic regression on standardized features, fitted by
    full-batch gradient descent with step 1/L for the smoothness bound L.
    The bias is not penalized.
    """
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    design = np.hstack([(x - mean) / std, np.ones((len(x), 1))])
    n = len(design)
    targets = np.eye(n_classes)[y]
    penalty = np.ones((design.shape[1], 1))
    penalty[-1] = 0.0

    step = 1.0 / (0.5 * np.linalg.norm(design, 2) ** 2 / n + l2)
    weights = np.zeros((design.shape[1], n_classes))
    previous = np.inf
    for iteration in range(max_iter):
        probs = _softmax(design @ weights)
        loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
        loss += 0.5 * l2 * float(((weights * penalty) ** 2).sum())
        if abs(previous - loss) < tol:
            break
        previous = loss
        grad = design.T @ (probs - targets) / n + l2 * weights * penalty
        weights -= step * grad
    log.debug(f"Logistic regression stopped after {iteration + 1} iterations, {loss=:.6f}")
    return LogisticModel(weights, mean, std)


def _run_folds(table: EmbeddingTable, folds: int, predict) -> list[ProbeReport]:
    """Cross-validate `predict(train_x, train_y, test_x) -> class scores`."""
    x, y, _ = table.labelled()
    classes = np.unique(y)
    y_index = np.searchsorted(classes, y)
    assignment = stratified_folds(y_index, folds)
    accuracies, aurocs = [], []
    for fold in range(folds):
        test = assignment == fold
        scores = predict(x[~test], y_index[~test], x[test], len(classes))
        accuracies.append(float(np.mean(scores.argmax(axis=1) == y_index[test])))
        if len(classes) == 2:
            aurocs.append(auroc(scores[:, 1], y_index[test]))
    reports = [summarize("accuracy", accuracies, len(y))]
    if aurocs:
        reports.append(summarize("auroc", aurocs, len(y)))
    return reports


def linear_probe(table: EmbeddingTable, folds: int = 5) -> list[ProbeReport]:
    def predict(train_x, train_y, test_x, n_classes):
        return fit_logistic(train_x, train_y, n_classes).predict_proba(test_x)

    reports = _run_folds(table, folds, predict)
    log.info(f"Linear probe: {reports[0].metric}={reports[0].mean:.4f} +- {reports[0].ci95:.4f}")
    return reports


def knn_scores(
    train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int, n_classes: int
) -> np.ndarray:
    """
    Vote share per class among the k nearest training rows (euclidean,
    distance ties to the lower row index). Tied votes go to the class with
    the smaller distance sum; the winner gets a small bonus so argmax picks it.
    """
    if k < 1:
        raise ProbeError(f"k_neighbors must be >= 1, got {k}")
    k = min(k, len(train_x))
    squared = (
        (test_x**2).sum(axis=1)[:, None]
        + (train_x**2).sum(axis=1)[None, :]
        - 2 * test_x @ train_x.T
    )
    distances = np.sqrt(np.maximum(squared, 0.0))
    scores = np.zeros((len(test_x), n_classes))
    for row, dist in enumerate(distances):
        nearest = np.argsort(dist, kind="stable")[:k]
        votes = np.bincount(train_y[nearest], minlength=n_classes).astype(np.float64)
        sums = np.bincount(train_y[nearest], weights=dist[nearest], minlength=n_classes)
        tied = np.flatnonzero(votes == votes.max())
        winner = tied[np.argmin(sums[tied])]
        scores[row] = votes / k
        scores[row, winner] += 0.5 / k
    return scores


def knn_probe(table: EmbeddingTable, k_neighbors: int = 5, folds: int = 5) -> list[ProbeReport]:
    def predict(train_x, train_y, test_x, n_classes):
        return knn_scores(train_x, train_y, test_x, k_neighbors, n_classes)

    reports = _run_folds(table, folds, predict)
    best = reports[0]
    log.info(f"kNN probe (k={k_neighbors}): accuracy={best.mean:.4f} +- {best.ci95:.4f}")
    return reports


@dataclass
class Projection:
    person_ids: list[str]
    labels: list[int | None]
    coordinates: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def _leading_eigenpair(matrix: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    """Power iteration started from the column of largest norm."""
    start = matrix[:, np.argmax((matrix**2).sum(axis=0))]
    norm = np.linalg.norm(start)
    if norm == 0:
        return 0.0, np.zeros(len(matrix))
    v = start / norm
    for _ in range(max_iter):
        y = matrix @ v
        w = float(v @ y)
        if np.linalg.norm(y - w * v) < tol * max(abs(w), 1e-300):
            break
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0, np.zeros(len(matrix))
        v = y / norm
    return float(v @ matrix @ v), v


def pca_project(table: EmbeddingTable, dims: int = 2) -> Projection:
    """
    Project mean-centred embeddings onto the leading principal directions of
    their covariance, found by power iteration with deflation. Each direction
    is signed so that its largest-magnitude entry is positive.
    """
    if len(table) < 3:
        raise ProjectionError(f"projection needs at least 3 rows, got {len(table)}")
    if dims < 1 or dims > table.dim:
        raise ProjectionError(f"cannot project {table.dim}-dimensional data onto {dims} dimensions")
    centred = table.vectors - table.vectors.mean(axis=0)
    covariance = centred.T @ centred / (len(centred) - 1)
    if np.trace(covariance) <= 0:
        raise ProjectionError("all rows are identical; there is no direction to project on")

    deflated = covariance.copy()
    components, variances = [], []
    for _ in range(dims):
        value, vector = _leading_eigenpair(deflated, PCA_TOL, PCA_MAX_ITER)
        if vector.any() and vector[np.argmax(np.abs(vector))] < 0:
            vector = -vector
        components.append(vector)
        variances.append(value)
        deflated -= value * np.outer(vector, vector)

    basis = np.stack(components, axis=1)
    log.debug(f"PCA explained variance: {variances}")
    return Projection(
        person_ids=list(table.person_ids),
        labels=list(table.labels),
        coordinates=centred @ basis,
        components=basis,
        explained_variance=np.array(variances),
    )


def write_projection(path: str, projection: Projection):
    dims = projection.coordinates.shape[1]
    names = ["x", "y"] if dims == 2 else [f"p{i}" for i in range(dims)]
    df = pd.DataFrame(projection.coordinates, columns=names)
    df.insert(0, "label", pd.array(projection.labels, dtype="Int64"))
    df.insert(0, "person_id", projection.person_ids)
    df.to_csv(path, index=False, float_format="%.9g")
    log.info(f"Wrote {len(df)} projected rows to {path}")
