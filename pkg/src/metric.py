"""
Distances on the unit hypersphere, negative-pair selection and metric-learning
losses.

For unit-norm rows the euclidean distance reduces to sqrt(2 - 2 A.B), so the
whole distance matrix of a batch comes from one Gram matrix product.
Pair labels follow the usual convention: Y = 0 for positive (same person)
pairs and Y = 1 for negative pairs.
"""
from dataclasses import dataclass, field

import numpy as np

import ndgrad as nd
from errors import ContractError, LossError, SelectionError
from utils.config_fields import require, require_choice

LOSSES = ("contrastive", "margin", "triplet")
NEGATIVE_STRATEGIES = ("random", "hard", "distance_weighted", "semi_hard")
REDUCTIONS = ("mean", "sum")

DISTANCE_EPS = 1e-12
WEIGHT_BOUNDS = (1e-8, 1e8)


@dataclass
class LossConfig:
    loss: str = "contrastive"
    contrastive_margin: float = 0.5
    margin_b: float = 1.0
    margin_m: float = 0.25
    triplet_alpha: float = 0.3
    reduction: str = "mean"

    def __post_init__(self):
        require_choice(self.loss, LOSSES, "loss")
        require_choice(self.reduction, REDUCTIONS, "reduction")
        require(self.contrastive_margin > 0, "contrastive_margin must be > 0")
        require(self.margin_b > 0, "margin_b must be > 0")
        require(self.margin_m > 0, "margin_m must be > 0")
        require(self.triplet_alpha > 0, "triplet_alpha must be > 0")


@dataclass
class NegSamplingConfig:
    strategy: str = "hard"
    neg_count: int = 5

    def __post_init__(self):
        require_choice(self.strategy, NEGATIVE_STRATEGIES, "negative sampling strategy")
        require(self.neg_count >= 1, f"neg_count must be >= 1, got {self.neg_count}")


def _pair_array(pairs) -> np.ndarray:
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _dedupe(pairs: list[tuple[int, int]]) -> np.ndarray:
    """Drop repeated unordered pairs, keeping the first orientation seen."""
    seen = set()
    kept = []
    for i, j in pairs:
        key = (min(i, j), max(i, j))
        if key not in seen:
            seen.add(key)
            kept.append((i, j))
    return _pair_array(kept)


@dataclass
class PairSelection:
    positive_pairs: np.ndarray = field(default_factory=lambda: _pair_array([]))
    negative_pairs: np.ndarray = field(default_factory=lambda: _pair_array([]))
    # (anchor, positive, negative) rows fixed by negative selection; None when
    # every negative of an anchor counts for each of its positives
    triplets: np.ndarray | None = None

    def __post_init__(self):
        self.positive_pairs = _pair_array(self.positive_pairs)
        self.negative_pairs = _pair_array(self.negative_pairs)
        if self.triplets is not None:
            self.triplets = np.asarray(self.triplets, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.positive_pairs) + len(self.negative_pairs)


def distance_matrix(embeddings: nd.Node) -> nd.Node:
    """D = sqrt(max(2 - 2 E E^T, eps)) with a zero diagonal; rows must be unit-norm."""
    n = embeddings.shape[0]
    gram = nd.matmul(embeddings, nd.transpose(embeddings))
    squared = nd.scale(gram, -2.0, 2.0)
    distances = nd.sqrt_floor(squared, DISTANCE_EPS, ceiling=4.0)
    off_diagonal = nd.leaf(1.0 - np.eye(n), dtype=embeddings.value.dtype)
    return nd.mul_elem(distances, off_diagonal)


def label_pairs(labels: np.ndarray) -> PairSelection:
    """All unordered same-label pairs as positives, all cross-label pairs as negatives."""
    labels = np.asarray(labels)
    if len(labels) < 2 or len(np.unique(labels)) < 2:
        raise SelectionError("pair selection needs at least two distinct labels")
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    return PairSelection(
        positive_pairs=np.stack([i[same], j[same]], axis=1),
        negative_pairs=np.stack([i[~same], j[~same]], axis=1),
    )


def _negative_candidates(n: int, selection: PairSelection) -> np.ndarray:
    mask = np.zeros((n, n), dtype=bool)
    neg = selection.negative_pairs
    mask[neg[:, 0], neg[:, 1]] = True
    mask[neg[:, 1], neg[:, 0]] = True
    return mask


def _nearest_first(candidates: np.ndarray, distances: np.ndarray) -> np.ndarray:
    """Candidates ordered by distance, ties broken by lower index."""
    return candidates[np.lexsort((candidates, distances[candidates]))]


def _inverse_density_weights(distances: np.ndarray, dim: int) -> np.ndarray:
    """
    Weights proportional to 1 / q(d), where q is the density of pairwise
    distances between uniform points on the unit sphere in `dim` dimensions.
    """
    d = np.clip(distances, 1e-6, 2.0 - 1e-6)
    log_q = (dim - 2.0) * np.log(d) + ((dim - 3.0) / 2.0) * np.log(1.0 - d * d / 4.0)
    low, high = np.log(WEIGHT_BOUNDS[0]), np.log(WEIGHT_BOUNDS[1])
    return np.exp(np.clip(-log_q, low, high))


def select_negatives(
    distances: np.ndarray,
    selection: PairSelection,
    config: NegSamplingConfig,
    rng: np.random.Generator,
    embedding_dim: int | None = None,
) -> PairSelection:
    """
    Keep the most useful negative pairs of `selection`; positives pass through.

    random            -- neg_count uniform negatives per anchor
    hard              -- neg_count nearest negatives per anchor
    semi_hard         -- per (anchor, positive), the nearest negative farther
                         than the positive, else the farthest negative
    distance_weighted -- neg_count negatives per anchor drawn with probability
                         proportional to the inverse distance density
    """
    if len(selection.negative_pairs) == 0:
        raise SelectionError("no negative pairs available for selection")
    n = distances.shape[0]
    candidates = _negative_candidates(n, selection)
    picked: list[tuple[int, int]] = []
    triplets: list[tuple[int, int, int]] = []

    if config.strategy == "semi_hard":
        for i, j in selection.positive_pairs:
            for anchor, positive in ((int(i), int(j)), (int(j), int(i))):
                cand = np.flatnonzero(candidates[anchor])
                if cand.size == 0:
                    continue
                row = distances[anchor]
                farther = cand[row[cand] > row[positive]]
                if farther.size:
                    negative = _nearest_first(farther, row)[0]
                else:
                    negative = _nearest_first(cand, -row)[0]
                picked.append((anchor, int(negative)))
                triplets.append((anchor, positive, int(negative)))
        return PairSelection(selection.positive_pairs, _dedupe(picked), triplets)

    if config.strategy == "distance_weighted" and embedding_dim is None:
        raise ContractError("distance_weighted sampling needs the embedding dimension")

    own: dict[int, list[int]] = {}
    for anchor in range(n):
        cand = np.flatnonzero(candidates[anchor])
        if cand.size == 0:
            continue
        count = min(config.neg_count, cand.size)
        row = distances[anchor]
        if config.strategy == "hard":
            chosen = _nearest_first(cand, row)[:count]
        elif config.strategy == "random":
            chosen = rng.choice(cand, size=count, replace=False)
        else:
            weights = _inverse_density_weights(row[cand], embedding_dim)  # type: ignore[arg-type]
            chosen = rng.choice(cand, size=count, replace=False, p=weights / weights.sum())
        own[anchor] = [int(j) for j in chosen]
        picked.extend((anchor, j) for j in own[anchor])
    for i, j in selection.positive_pairs:
        for anchor, positive in ((int(i), int(j)), (int(j), int(i))):
            triplets.extend((anchor, positive, negative) for negative in own.get(anchor, []))
    return PairSelection(selection.positive_pairs, _dedupe(picked), triplets)


def _pair_distances(distances: nd.Node, pairs: np.ndarray) -> nd.Node:
    return nd.take_elements(distances, pairs[:, 0], pairs[:, 1])


def _reduce(terms: list[nd.Node], count: int, reduction: str) -> nd.Node:
    total = nd.sum_all(terms[0])
    for term in terms[1:]:
        total = nd.add(total, nd.sum_all(term))
    if reduction == "mean":
        return nd.scale(total, 1.0 / count)
    return total


def contrastive_loss(
    distances: nd.Node, selection: PairSelection, m: float, reduction: str = "mean"
) -> nd.Node:
    """(1 - Y) * D^2 / 2 + Y * max(0, m - D)^2 / 2 over the selected pairs."""
    if len(selection) == 0:
        raise LossError("contrastive loss over an empty pair selection")
    terms = []
    if len(selection.positive_pairs):
        d_pos = _pair_distances(distances, selection.positive_pairs)
        terms.append(nd.scale(nd.square(d_pos), 0.5))
    if len(selection.negative_pairs):
        d_neg = _pair_distances(distances, selection.negative_pairs)
        terms.append(nd.scale(nd.square(nd.relu(nd.scale(d_neg, -1.0, m))), 0.5))
    return _reduce(terms, len(selection), reduction)


def margin_loss(
    distances: nd.Node, selection: PairSelection, b: float, m: float, reduction: str = "mean"
) -> nd.Node:
    """(1 - Y) * max(0, D - b + m) + Y * max(0, b - D + m) over the selected pairs."""
    if len(selection) == 0:
        raise LossError("margin loss over an empty pair selection")
    terms = []
    if len(selection.positive_pairs):
        d_pos = _pair_distances(distances, selection.positive_pairs)
        terms.append(nd.relu(nd.scale(d_pos, 1.0, m - b)))
    if len(selection.negative_pairs):
        d_neg = _pair_distances(distances, selection.negative_pairs)
        terms.append(nd.relu(nd.scale(d_neg, -1.0, b + m)))
    return _reduce(terms, len(selection), reduction)


def make_triplets(selection: PairSelection) -> np.ndarray:
    """
    Returns [t x 3] (anchor, pos, neg). Negatives chosen by `select_negatives`
    stay with the anchor, or the (anchor, positive) pair, they were chosen for.
    Without such a choice every positive pair, in both orientations, is
    crossed with all negative pairs that touch its anchor.
    """
    if selection.triplets is not None:
        return selection.triplets
    by_anchor: dict[int, list[int]] = {}
    for i, j in selection.negative_pairs:
        by_anchor.setdefault(int(i), []).append(int(j))
        by_anchor.setdefault(int(j), []).append(int(i))
    triplets = []
    for i, j in selection.positive_pairs:
        for anchor, positive in ((int(i), int(j)), (int(j), int(i))):
            for negative in by_anchor.get(anchor, []):
                triplets.append((anchor, positive, negative))
    return np.asarray(triplets, dtype=np.int64).reshape(-1, 3)


def triplet_loss(
    distances: nd.Node, triplets: np.ndarray, alpha: float, reduction: str = "mean"
) -> nd.Node:
    """max(0, d(a, p) - d(a, n) + alpha) over the triplets."""
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(triplets) == 0:
        raise LossError("triplet loss over an empty triplet set")
    d_ap = nd.take_elements(distances, triplets[:, 0], triplets[:, 1])
    d_an = nd.take_elements(distances, triplets[:, 0], triplets[:, 2])
    hinge = nd.relu(nd.scale(nd.sub(d_ap, d_an), 1.0, alpha))
    return _reduce([hinge], len(triplets), reduction)


def compute_loss(distances: nd.Node, selection: PairSelection, config: LossConfig) -> nd.Node:
    if config.loss == "contrastive":
        return contrastive_loss(distances, selection, config.contrastive_margin, config.reduction)
    if config.loss == "margin":
        return margin_loss(distances, selection, config.margin_b, config.margin_m, config.reduction)
    return triplet_loss(distances, make_triplets(selection), config.triplet_alpha, config.reduction)
