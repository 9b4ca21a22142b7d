"""
Sub-sequence generation and batch assembly.

Each person in a batch contributes K sub-sequences of their own sequence; two
sub-sequences of the same person form a positive pair, sub-sequences of
different persons a negative pair. The strategies work on any sequence type
with `len()` and `take(indices)` (raw or encoded sequences).
"""
import math
from dataclasses import dataclass
from typing import Protocol, Sequence, TypeVar

import numpy as np

from errors import BatchError, GenerationError, InputError
from utils.config_fields import require, require_choice
from utils.custom_logger import log

STRATEGIES = ("random_sample", "disjoint", "random_slice")
MAX_SPLIT_ATTEMPTS = 16

# Slice bounds used with the synthetic generator's short sequences
SYNTHETIC_MIN_LENGTH = 5
SYNTHETIC_MAX_LENGTH = 25


class Sliceable(Protocol):
    def __len__(self) -> int:
        ...

    def take(self, indices: np.ndarray):
        ...


S = TypeVar("S", bound=Sliceable)


@dataclass
class SubSeqConfig:
    strategy: str = "random_slice"
    k: int = 5
    min_length: int = 25
    max_length: int = 200
    sample_fraction: float = 0.8

    def __post_init__(self):
        require_choice(self.strategy, STRATEGIES, "pairing strategy")
        require(self.k >= 2, f"K must be >= 2, got {self.k}")
        require(
            1 <= self.min_length <= self.max_length,
            f"slice bounds must satisfy 1 <= m <= M, got {self.min_length}, {self.max_length}",
        )
        require(
            0 < self.sample_fraction <= 1,
            f"sample_fraction must be in (0, 1], got {self.sample_fraction}",
        )

    def min_sequence_length(self) -> int:
        if self.strategy == "disjoint":
            return self.k
        if self.strategy == "random_slice":
            return self.min_length
        return 1


def split_disjoint(seq: S, k: int, rng: np.random.Generator) -> list[S]:
    """Assign every event to one of k parts at random; re-draw if a part is empty."""
    length = len(seq)
    if length < k:
        raise InputError(f"cannot split a sequence of length {length} into {k} parts")
    if k == 1:
        return [seq.take(np.arange(length))]
    for _ in range(MAX_SPLIT_ATTEMPTS):
        inds = np.asarray(rng.integers(1, k + 1, size=length))
        parts = [np.flatnonzero(inds == i) for i in range(1, k + 1)]
        if all(p.size for p in parts):
            return [seq.take(p) for p in parts]
    raise GenerationError(
        f"no split of length {length} into {k} non-empty parts after {MAX_SPLIT_ATTEMPTS} attempts"
    )


def sample_slice(seq: S, k: int, m: int, M: int, rng: np.random.Generator) -> list[S]:
    """k contiguous slices with lengths uniform in [m, min(M, l)]; slices may overlap."""
    length = len(seq)
    if length < m:
        raise InputError(f"sequence of length {length} is shorter than the minimal slice {m}")
    slices = []
    for _ in range(k):
        slice_length = int(rng.integers(m, min(M, length) + 1))
        start = int(rng.integers(0, length - slice_length + 1))
        slices.append(seq.take(np.arange(start, start + slice_length)))
    return slices


def sample_random(seq: S, k: int, fraction: float, rng: np.random.Generator) -> list[S]:
    """k independent draws without replacement of ceil(fraction * l) events, order kept."""
    length = len(seq)
    size = math.ceil(fraction * length)
    if size < 1:
        raise InputError(f"sample of fraction {fraction} from length {length} is empty")
    return [seq.take(np.sort(rng.choice(length, size=size, replace=False))) for _ in range(k)]


def generate_subsequences(seq: S, config: SubSeqConfig, rng: np.random.Generator) -> list[S]:
    if config.strategy == "disjoint":
        return split_disjoint(seq, config.k, rng)
    if config.strategy == "random_slice":
        return sample_slice(seq, config.k, config.min_length, config.max_length, rng)
    return sample_random(seq, config.k, config.sample_fraction, rng)


@dataclass
class TrainingBatch:
    """N persons x K sub-sequences, person-major; labels are batch-local person indices."""

    samples: list
    labels: np.ndarray
    person_indices: list[int]
    n_persons: int
    k: int


def make_batch(
    dataset: Sequence[S],
    person_indices: Sequence[int],
    config: SubSeqConfig,
    rng: np.random.Generator,
) -> TrainingBatch:
    """
    Build a batch from the given persons. A person whose sequence is too short
    for the strategy, or whose disjoint split keeps leaving a part empty, is
    replaced by another eligible person from the dataset.
    """
    chosen = [int(i) for i in person_indices]
    if len(chosen) < 2 or len(set(chosen)) != len(chosen):
        raise BatchError(f"a batch needs at least 2 distinct persons, got {chosen}")

    needed = config.min_sequence_length()
    used = set(chosen)
    samples: list = []
    for slot in range(len(chosen)):
        while True:
            index = chosen[slot]
            if len(dataset[index]) >= needed:
                try:
                    samples.extend(generate_subsequences(dataset[index], config, rng))
                    break
                except GenerationError as e:
                    reason = str(e)
            else:
                reason = "too short"
            eligible = [
                i for i in range(len(dataset)) if i not in used and len(dataset[i]) >= needed
            ]
            if not eligible:
                raise BatchError(
                    f"cannot find {len(chosen)} distinct persons with at least {needed} events "
                    f"that split into {config.k} sub-sequences"
                )
            replacement = int(rng.choice(eligible))
            log.debug(f"Replacing person {index} ({reason}) with {replacement}")
            chosen[slot] = replacement
            used.add(replacement)

    labels = np.repeat(np.arange(len(chosen)), config.k)
    return TrainingBatch(samples, labels, chosen, len(chosen), config.k)


def epoch_batches(n_persons: int, batch_persons: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle persons and cut them into floor(n / N) batches without replacement."""
    order = rng.permutation(n_persons)
    steps = n_persons // batch_persons
    return [order[i * batch_persons : (i + 1) * batch_persons] for i in range(steps)]


def partner_counts(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per sample, the number of positive and negative partners in the batch."""
    same = labels[:, None] == labels[None, :]
    positives = same.sum(axis=1) - 1
    negatives = (~same).sum(axis=1)
    return positives, negatives
