"""
Metric-learning training loop and supervised fine-tuning.

One training step: draw N persons, cut K sub-sequences from each, encode the
N*K sub-sequences, normalize, compute the distance matrix, select negatives,
evaluate the loss and update all parameters with Adam.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from time import perf_counter
from typing import Any, Sequence

import numpy as np
from tqdm import tqdm

import metric
import ndgrad as nd
from checkpoint import HEAD_PREFIX, TENSOR_DTYPE, Checkpoint
from config import TrainConfig
from encoder import EncoderParams, encode_batch, encode_many, init_params, param_nodes
from errors import ConfigError, NumericError, ShapeError
from evaluation import auroc, fit_logistic
from ingest import (
    EncodedSequence,
    EventSequence,
    Schema,
    Vocabulary,
    build_vocabulary,
    split_persons,
)
from pairing import TrainingBatch, epoch_batches, make_batch
from utils.config_fields import config_digest, require
from utils.custom_logger import log
from utils.profile import time_this


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in tensors.items()},
            v={k: np.zeros_like(t) for k, t in tensors.items()},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": t for k, t in self.m.items()}
        out.update({f"adam.v.{k}": t for k, t in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], names: Sequence[str], step: int):
        dtype = nd.get_dtype()
        return cls(
            m={k: tensors[f"adam.m.{k}"].astype(dtype) for k in names},
            v={k: tensors[f"adam.v.{k}"].astype(dtype) for k in names},
            step=step,
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def grad_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    return {k: float(np.linalg.norm(g)) for k, g in grads.items()}


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """One Adam update with bias-corrected moments, applied in place per named tensor."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient of {name} has shape {g.shape}, expected {params[name].shape}"
            )
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericError("non-finite gradient", state.step, float("nan"), grad_norms(grads))

    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        params[name] -= update.astype(params[name].dtype)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


def batch_loss(
    params: EncoderParams,
    nodes: dict[str, nd.Node],
    batch: TrainingBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    mode: str = "train",
) -> nd.Node:
    states = encode_batch(batch.samples, params, nodes, mode)
    distances = metric.distance_matrix(nd.l2_normalize(states))
    selection = metric.select_negatives(
        distances.value,
        metric.label_pairs(batch.labels),
        config.negatives,
        rng,
        embedding_dim=params.hidden_size,
    )
    return metric.compute_loss(distances, selection, config.loss)


def checkpoint_tensors(params: EncoderParams, adam: AdamState | None = None, extra=None):
    """All stored tensors, rounded to the on-disk float type."""
    tensors = dict(params.tensors)
    tensors.update(params.buffers())
    if adam is not None:
        tensors.update(adam.tensors())
    if extra:
        tensors.update(extra)
    return {k: np.asarray(v, dtype=TENSOR_DTYPE) for k, v in tensors.items()}


Streams = tuple[
    np.random.Generator, np.random.Generator, np.random.Generator, np.random.SeedSequence
]


def _rngs(seed: int) -> Streams:
    """Streams for the person split, initialization and training, plus the validation seed."""
    split, init, train, validation = np.random.SeedSequence(seed).spawn(4)
    return (
        np.random.default_rng(split),
        np.random.default_rng(init),
        np.random.default_rng(train),
        validation,
    )


def _validation_loss(
    params: EncoderParams,
    encoded: list[EncodedSequence],
    config: TrainConfig,
    seed: np.random.SeedSequence,
) -> float:
    """Infer-mode loss over fixed validation batches; nan without at least two persons."""
    if len(encoded) < 2:
        return float("nan")
    rng = np.random.default_rng(seed)
    n = min(config.train.batch_persons, len(encoded))
    nodes = param_nodes(params)
    losses = []
    for persons in epoch_batches(len(encoded), n, rng):
        batch = make_batch(encoded, persons, config.pairing, rng)
        losses.append(float(batch_loss(params, nodes, batch, config, rng, "infer").value[0, 0]))
    return float(np.mean(losses))


@time_this
def train(
    config: TrainConfig,
    dataset: list[EventSequence],
    schema: Schema,
    progress: bool = False,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """
    Train the encoder by metric learning. Validation persons are held out
    before any batch is drawn and only ever encoded in infer mode.
    """
    split_rng, init_rng, train_rng, validation_seed = _rngs(config.train.seed)
    train_set, val_set = split_persons(dataset, config.train.validation_fraction, split_rng)
    n_batch = config.train.batch_persons
    if len(train_set) < n_batch:
        raise ConfigError(
            f"{len(train_set)} training persons cannot fill batches of {n_batch} persons"
        )

    if resume is None:
        vocabulary = build_vocabulary(train_set, schema)
        params = init_params(vocabulary.feature_layout(), config.encoder, init_rng)
        adam = AdamState.zeros_like(params.tensors)
        start_epoch, step = 1, 0
    else:
        vocabulary = resume.get_vocabulary()
        params = resume.encoder_params()
        adam = AdamState.from_tensors(resume.tensors, list(params.tensors), resume.step)
        train_rng.bit_generator.state = resume.rng_state
        start_epoch, step = resume.epoch + 1, resume.step
        log.info(f"Resuming from epoch {resume.epoch} (step {step})")

    encoded_train = [vocabulary.encode(seq) for seq in train_set]
    encoded_val = [vocabulary.encode(seq) for seq in val_set]
    steps_per_epoch = len(train_set) // n_batch
    log.info(
        f"Training on {len(train_set)} persons ({len(val_set)} held out for validation), "
        f"{steps_per_epoch} steps per epoch"
    )
    log.debug(f"{n_batch=} k={config.pairing.k} {params.input_width=} {params.hidden_size=}")

    settings = config.train
    history = []
    epochs = range(start_epoch, settings.epochs + 1)
    for epoch in tqdm(epochs, desc="epochs", disable=not progress, leave=False):
        start = perf_counter()
        losses = []
        for persons in epoch_batches(len(encoded_train), n_batch, train_rng):
            batch = make_batch(encoded_train, persons, config.pairing, train_rng)
            nodes = param_nodes(params)
            loss = batch_loss(params, nodes, batch, config, train_rng, "train")
            nd.backward(loss)
            grads = {name: node.grad for name, node in nodes.items()}

            value = float(loss.value[0, 0])
            if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
                raise NumericError("training diverged", step, value, grad_norms(grads))
            clip_by_global_norm(grads, settings.clip_norm)
            optimizer_step(
                params.tensors,
                grads,
                adam,
                settings.learning_rate,
                (settings.beta1, settings.beta2),
                settings.adam_eps,
            )
            step += 1
            losses.append(value)

        train_loss = float(np.mean(losses))
        val_loss = _validation_loss(params, encoded_val, config, validation_seed)
        history.append(EpochMetrics(epoch, train_loss, val_loss, perf_counter() - start))
        tqdm.write(f"epoch={epoch} train_loss={train_loss:.6f} val_loss={val_loss:.6f}")

    checkpoint = Checkpoint(
        config=config.to_dict(),
        schema=schema.to_dict(),
        vocabulary=vocabulary.to_dict(),
        tensors=checkpoint_tensors(params, adam),
        epoch=settings.epochs if history else start_epoch - 1,
        step=step,
        rng_state=train_rng.bit_generator.state,
        extra={"stage": "metric_learning"},
    )
    return checkpoint, history


@dataclass
class FineTuneConfig:
    learning_rate: float = 0.0005
    epochs: int = 10
    batch_persons: int = 64
    test_fraction: float = 0.1
    freeze_encoder: bool = False
    pretrained: bool = True
    label_fraction: float = 1.0
    warm_start: bool = True
    selection_fraction: float = 0.2
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        require(self.learning_rate > 0, f"learning_rate must be > 0, got {self.learning_rate}")
        require(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        require(self.batch_persons >= 1, f"batch_persons must be >= 1, got {self.batch_persons}")
        require(
            0 < self.test_fraction < 1,
            f"test_fraction must be in (0, 1), got {self.test_fraction}",
        )
        require(
            0 < self.label_fraction <= 1,
            f"label_fraction must be in (0, 1], got {self.label_fraction}",
        )
        require(
            0 <= self.selection_fraction < 1,
            f"selection_fraction must be in [0, 1), got {self.selection_fraction}",
        )
        require(
            self.pretrained or not self.freeze_encoder,
            "freezing a randomly initialized encoder is not a fine-tuning setup",
        )

    def digest(self) -> str:
        return config_digest(dataclasses.asdict(self))


@dataclass
class FineTuneReport:
    accuracy: float
    auroc: float | None
    n_train: int
    n_test: int
    losses: list[float] = field(default_factory=list)
    # accuracy of the warm-start head on the unchanged encoder, same test persons
    head_only_accuracy: float | None = None
    # 0 when the warm start was kept over every fine-tuned epoch
    best_epoch: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "auroc": self.auroc,
            "head_only_accuracy": self.head_only_accuracy,
            "best_epoch": self.best_epoch,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


def init_head(hidden_size: int, n_classes: int) -> dict[str, np.ndarray]:
    if n_classes < 2:
        raise ConfigError(f"a classification head needs at least 2 classes, got {n_classes}")
    dtype = nd.get_dtype()
    return {
        f"{HEAD_PREFIX}W": np.zeros((hidden_size, n_classes), dtype=dtype),
        f"{HEAD_PREFIX}b": np.zeros((1, n_classes), dtype=dtype),
    }


def fit_head(states: np.ndarray, targets: np.ndarray, n_classes: int) -> dict[str, np.ndarray]:
    """
    Head weights equal to a logistic regression fitted on the states, with
    the regression's standardization folded into W and b.
    """
    model = fit_logistic(states, targets, n_classes)
    scaled = model.weights[:-1] / model.std[:, None]
    bias = model.weights[-1:] - (model.mean / model.std) @ model.weights[:-1]
    dtype = nd.get_dtype()
    return {f"{HEAD_PREFIX}W": scaled.astype(dtype), f"{HEAD_PREFIX}b": bias.astype(dtype)}


def head_logits(states: nd.Node, nodes: dict[str, nd.Node]) -> nd.Node:
    return nd.add(nd.matmul(states, nodes[f"{HEAD_PREFIX}W"]), nodes[f"{HEAD_PREFIX}b"])


def _class_index(dataset: list[EventSequence], schema: Schema) -> list[int]:
    if schema.label_field is None:
        raise ConfigError("fine-tuning needs a schema with a label column")
    missing = [seq.person_id for seq in dataset if seq.label is None]
    if missing:
        raise ConfigError(f"{len(missing)} persons have no label (first: {missing[0]!r})")
    classes = sorted({int(seq.label) for seq in dataset})  # type: ignore[arg-type]
    if len(classes) < 2:
        raise ConfigError(f"fine-tuning needs at least 2 classes, got {classes}")
    return classes


def predict_proba(
    params: EncoderParams, head: dict[str, np.ndarray], sequences: list[EncodedSequence]
) -> np.ndarray:
    states = encode_many(sequences, params)
    logits = states @ head[f"{HEAD_PREFIX}W"] + head[f"{HEAD_PREFIX}b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    return probs / probs.sum(axis=1, keepdims=True)


def _selection_score(
    params: EncoderParams,
    head: dict[str, np.ndarray],
    sequences: list[EncodedSequence],
    targets: np.ndarray,
) -> tuple[float, float]:
    """(accuracy, -cross-entropy) of held-aside training persons; larger is better."""
    probs = predict_proba(params, head, sequences)
    accuracy = float(np.mean(probs.argmax(axis=1) == targets))
    nll = float(-np.mean(np.log(probs[np.arange(len(targets)), targets] + 1e-12)))
    return accuracy, -nll


@time_this
def fine_tune(
    dataset: list[EventSequence],
    schema: Schema,
    ft_config: FineTuneConfig,
    checkpoint: Checkpoint | None = None,
    config: TrainConfig | None = None,
) -> tuple[Checkpoint, FineTuneReport]:
    """
    Attach a softmax head to the raw final state and train it, jointly with
    the encoder unless `freeze_encoder` is set. With `pretrained=False` the
    encoder starts from a fresh initialization (supervised baseline).

    With `warm_start` the head starts as a logistic regression fitted on the
    frozen encoder's final states of the training persons. A `selection_fraction`
    of the training persons is kept out of the gradient steps; after every
    epoch they score the model, and the best epoch (0 being the warm start)
    is the one returned. Accuracy, and AUROC for two classes, are measured on
    held-out test persons.
    """
    classes = _class_index(dataset, schema)
    to_class = {c: i for i, c in enumerate(classes)}
    split_rng, init_rng, train_rng, _ = _rngs(ft_config.seed)

    train_set, test_set = split_persons(dataset, ft_config.test_fraction, split_rng)
    if not test_set or not train_set:
        raise ConfigError(f"test_fraction {ft_config.test_fraction} leaves an empty split")
    if ft_config.label_fraction < 1:
        n_labelled = max(1, math.ceil(ft_config.label_fraction * len(train_set)))
        keep = np.sort(train_rng.choice(len(train_set), size=n_labelled, replace=False))
        train_set = [train_set[i] for i in keep]

    if ft_config.pretrained:
        if checkpoint is None:
            raise ConfigError("fine-tuning a pre-trained encoder needs a checkpoint")
        vocabulary = checkpoint.get_vocabulary()
        params = checkpoint.encoder_params()
        config_dict = checkpoint.config
    else:
        config = config or TrainConfig()
        vocabulary = build_vocabulary(train_set, schema)
        params = init_params(vocabulary.feature_layout(), config.encoder, init_rng)
        config_dict = config.to_dict()
    log.info(
        f"Fine-tuning on {len(train_set)} labelled persons, {len(classes)} classes, "
        f"{len(test_set)} test persons"
    )

    def targets_of(sequences: list[EventSequence]) -> np.ndarray:
        return np.array([to_class[int(s.label)] for s in sequences])  # type: ignore[arg-type]

    encoded_train = [vocabulary.encode(seq) for seq in train_set]
    targets = targets_of(train_set)
    encoded_test = [vocabulary.encode(seq) for seq in test_set]
    truth = targets_of(test_set)

    head_only_accuracy = None
    if ft_config.warm_start and len(np.unique(targets)) > 1:
        head = fit_head(encode_many(encoded_train, params), targets, len(classes))
        probs = predict_proba(params, head, encoded_test)
        head_only_accuracy = float(np.mean(probs.argmax(axis=1) == truth))
        log.info(f"Warm-start head accuracy={head_only_accuracy:.4f}")
    else:
        head = init_head(params.hidden_size, len(classes))

    fit_index, held_index = split_persons(
        list(range(len(encoded_train))), ft_config.selection_fraction, split_rng
    )
    if len(fit_index) < 1:
        fit_index, held_index = held_index, []
    held_aside = [encoded_train[i] for i in held_index]
    held_targets = targets[held_index]
    best_epoch, best_score = 0, (-math.inf, -math.inf)
    best = (params.copy(), {k: v.copy() for k, v in head.items()})
    if held_aside:
        best_score = _selection_score(params, head, held_aside, held_targets)

    trainable = dict(head) if ft_config.freeze_encoder else {**params.tensors, **head}
    adam = AdamState.zeros_like(trainable)
    mode = "infer" if ft_config.freeze_encoder else "train"

    losses = []
    step = 0
    for epoch in range(1, ft_config.epochs + 1):
        order = np.asarray(fit_index)[train_rng.permutation(len(fit_index))]
        chunks = [
            order[i : i + ft_config.batch_persons]
            for i in range(0, len(order), ft_config.batch_persons)
        ]
        epoch_losses = []
        for chunk in chunks:
            if mode == "train" and sum(len(encoded_train[i]) for i in chunk) < 2:
                continue
            nodes = param_nodes(params)
            nodes.update({name: nd.Node(value) for name, value in head.items()})
            states = encode_batch([encoded_train[i] for i in chunk], params, nodes, mode)
            loss = nd.softmax_cross_entropy(head_logits(states, nodes), targets[chunk])
            nd.backward(loss)
            grads = {name: nodes[name].grad for name in trainable}

            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise NumericError("fine-tuning diverged", step, value, grad_norms(grads))
            clip_by_global_norm(grads, ft_config.clip_norm)
            optimizer_step(trainable, grads, adam, ft_config.learning_rate)
            step += 1
            epoch_losses.append(value)
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))

        score = _selection_score(params, head, held_aside, held_targets) if held_aside else None
        log.info(f"fine-tune epoch={epoch} loss={losses[-1]:.6f} held_aside={score}")
        if score is None or score > best_score:
            best_epoch, best_score = epoch, score or best_score
            best = (params.copy(), {k: v.copy() for k, v in head.items()})

    params, head = best
    log.debug(f"Keeping fine-tune epoch {best_epoch}")

    probs = predict_proba(params, head, encoded_test)
    accuracy = float(np.mean(probs.argmax(axis=1) == truth))
    auroc_score = None
    if len(classes) == 2 and len(np.unique(truth)) == 2:
        auroc_score = auroc(probs[:, 1], truth)
    report = FineTuneReport(
        accuracy,
        auroc_score,
        len(train_set),
        len(test_set),
        losses,
        head_only_accuracy=head_only_accuracy,
        best_epoch=best_epoch,
    )
    log.info(f"Fine-tuned accuracy={accuracy:.4f} auroc={auroc_score} best_epoch={best_epoch}")

    finetuned = Checkpoint(
        config=config_dict,
        schema=schema.to_dict(),
        vocabulary=vocabulary.to_dict(),
        tensors=checkpoint_tensors(params, extra=head),
        epoch=ft_config.epochs,
        step=step,
        rng_state=train_rng.bit_generator.state,
        extra={
            "stage": "fine_tune",
            "classes": classes,
            "freeze_encoder": ft_config.freeze_encoder,
            "pretrained": ft_config.pretrained,
            "label_fraction": ft_config.label_fraction,
            "warm_start": ft_config.warm_start,
            "best_epoch": best_epoch,
        },
    )
    return finetuned, report
