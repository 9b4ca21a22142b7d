import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

import ndgrad as nd
from errors import ConfigError, ContractError, LossError, SelectionError
from metric import (
    LossConfig,
    NegSamplingConfig,
    PairSelection,
    compute_loss,
    contrastive_loss,
    distance_matrix,
    label_pairs,
    make_triplets,
    margin_loss,
    select_negatives,
    triplet_loss,
)

pytestmark = pytest.mark.usefixtures("float64")

LABELS = np.repeat(np.arange(4), 3)


def unit_rows(rng, n, d=6):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def pair_set(pairs):
    return {frozenset((int(i), int(j))) for i, j in pairs}


def hand_distances():
    """Three points: d(0, 1) = 0.9, d(0, 2) = 0.1, d(1, 2) = 1.0."""
    d = np.array([[0.0, 0.9, 0.1], [0.9, 0.0, 1.0], [0.1, 1.0, 0.0]])
    return nd.leaf(d)


ONE_OF_EACH = PairSelection(positive_pairs=[(0, 1)], negative_pairs=[(0, 2)])


def test_gram_distances_match_direct_distances(rng):
    e = unit_rows(rng, 10)
    direct = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
    assert_allclose(distance_matrix(nd.leaf(e)).value, direct, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 12), d=st.integers(2, 16), seed=st.integers(0, 2**32 - 1))
def test_distance_identity_on_the_sphere(n, d, seed):
    e = unit_rows(np.random.default_rng(seed), n, d)
    distances = distance_matrix(nd.leaf(e)).value
    direct = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=2)
    # distances below the floor read as its square root
    assert_allclose(distances, direct, atol=1e-5)
    assert_allclose(distances, distances.T)
    assert (np.diag(distances) == 0.0).all()
    assert (distances <= 2.0 + 1e-12).all()


def test_orthogonal_pair_distance():
    d = distance_matrix(nd.leaf(np.eye(2))).value
    assert d[0, 1] == pytest.approx(np.sqrt(2))
    assert d[0, 0] == 0.0


def test_label_pairs():
    selection = label_pairs(np.array([0, 0, 1]))
    assert pair_set(selection.positive_pairs) == {frozenset((0, 1))}
    assert pair_set(selection.negative_pairs) == {frozenset((0, 2)), frozenset((1, 2))}
    with pytest.raises(SelectionError):
        label_pairs(np.array([3, 3, 3]))


def batch_labels(rng):
    """Labels of a batch with 2..8 persons and 2..4 sub-sequences each (n <= 32)."""
    return np.repeat(np.arange(rng.integers(2, 9)), rng.integers(2, 5))


@pytest.mark.parametrize("seed", range(100))
def test_hard_negatives_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    labels = batch_labels(rng)
    n = len(labels)
    distances = distance_matrix(nd.leaf(unit_rows(rng, n))).value
    config = NegSamplingConfig(strategy="hard", neg_count=2)
    selection = label_pairs(labels)
    picked = select_negatives(distances, selection, config, rng)

    nearest = {}
    for anchor in range(n):
        others = [j for j in range(n) if labels[j] != labels[anchor]]
        nearest[anchor] = sorted(others, key=lambda j: (distances[anchor, j], j))[:2]
    expected = set()
    for anchor, chosen in nearest.items():
        expected |= pair_set((anchor, j) for j in chosen)
    assert pair_set(picked.negative_pairs) == expected
    assert len(picked.negative_pairs) == len(expected)
    assert_allclose(picked.positive_pairs, selection.positive_pairs)

    triplets = [
        (int(a), int(p), neg)
        for i, j in selection.positive_pairs
        for a, p in ((i, j), (j, i))
        for neg in nearest[int(a)]
    ]
    assert sorted(map(tuple, make_triplets(picked).tolist())) == sorted(triplets)


@pytest.mark.parametrize("seed", range(100))
def test_semi_hard_negatives_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    labels = batch_labels(rng)
    n = len(labels)
    distances = distance_matrix(nd.leaf(unit_rows(rng, n))).value
    selection = label_pairs(labels)
    picked = select_negatives(distances, selection, NegSamplingConfig(strategy="semi_hard"), rng)

    triplets = []
    for i, j in selection.positive_pairs:
        for anchor, positive in ((int(i), int(j)), (int(j), int(i))):
            row = distances[anchor]
            negatives = [k for k in range(n) if labels[k] != labels[anchor]]
            farther = [k for k in negatives if row[k] > row[positive]]
            if farther:
                negative = min(farther, key=lambda k: (row[k], k))
            else:
                negative = max(negatives, key=lambda k: (row[k], -k))
            triplets.append((anchor, positive, negative))
    assert pair_set(picked.negative_pairs) == pair_set((a, k) for a, _, k in triplets)
    assert sorted(map(tuple, make_triplets(picked).tolist())) == sorted(triplets)


def test_triplets_keep_each_anchors_own_negatives(rng):
    # labels [0, 0, 1, 1]; nearest negative: 0 -> 2, 1 -> 2, 2 -> 0, 3 -> 0
    distances = np.array(
        [
            [0.0, 0.4, 0.2, 0.5],
            [0.4, 0.0, 0.3, 0.8],
            [0.2, 0.3, 0.0, 0.6],
            [0.5, 0.8, 0.6, 0.0],
        ]
    )
    config = NegSamplingConfig(strategy="hard", neg_count=1)
    picked = select_negatives(distances, label_pairs(np.array([0, 0, 1, 1])), config, rng)
    assert picked.negative_pairs.tolist() == [[0, 2], [1, 2], [3, 0]]
    # pair (1, 2) was chosen for anchor 1, so anchor 2 does not train against 1
    assert sorted(make_triplets(picked).tolist()) == [[0, 1, 2], [1, 0, 2], [2, 3, 0], [3, 2, 0]]


@pytest.mark.parametrize("strategy", ["random", "distance_weighted"])
def test_sampled_negatives_are_valid(strategy, rng):
    distances = distance_matrix(nd.leaf(unit_rows(rng, len(LABELS)))).value
    config = NegSamplingConfig(strategy=strategy, neg_count=3)
    picked = select_negatives(distances, label_pairs(LABELS), config, rng, embedding_dim=6)
    assert all(LABELS[i] != LABELS[j] for i, j in picked.negative_pairs)
    assert len(pair_set(picked.negative_pairs)) == len(picked.negative_pairs)
    anchors = set(picked.negative_pairs.ravel().tolist())
    assert anchors == set(range(len(LABELS)))


def test_selection_errors(rng):
    distances = np.zeros((3, 3))
    only_positives = PairSelection(positive_pairs=[(0, 1)])
    with pytest.raises(SelectionError):
        select_negatives(distances, only_positives, NegSamplingConfig(), rng)
    with pytest.raises(ContractError):
        select_negatives(
            distances, label_pairs(np.array([0, 0, 1])), NegSamplingConfig("distance_weighted"), rng
        )


def test_contrastive_loss_value():
    loss = contrastive_loss(hand_distances(), ONE_OF_EACH, m=0.5)
    # positive 0.9^2 / 2, negative (0.5 - 0.1)^2 / 2
    assert loss.value[0, 0] == pytest.approx((0.405 + 0.08) / 2)
    total = contrastive_loss(hand_distances(), ONE_OF_EACH, m=0.5, reduction="sum")
    assert total.value[0, 0] == pytest.approx(0.485)


def test_margin_loss_value():
    loss = margin_loss(hand_distances(), ONE_OF_EACH, b=1.0, m=0.25)
    # positive 0.9 - 1 + 0.25, negative 1 - 0.1 + 0.25
    assert loss.value[0, 0] == pytest.approx((0.15 + 1.15) / 2)


def test_triplet_loss_value():
    triplets = make_triplets(ONE_OF_EACH)
    assert triplets.tolist() == [[0, 1, 2]]
    loss = triplet_loss(hand_distances(), triplets, alpha=0.3)
    assert loss.value[0, 0] == pytest.approx(0.9 - 0.1 + 0.3)


def test_make_triplets_crosses_both_orientations():
    triplets = make_triplets(label_pairs(np.array([0, 0, 1, 1])))
    assert len(triplets) == 8
    assert {tuple(t) for t in triplets.tolist()} >= {(0, 1, 2), (1, 0, 3), (2, 3, 0)}


@pytest.mark.parametrize("loss", ["contrastive", "margin", "triplet"])
def test_solved_configuration_has_zero_loss(loss):
    # two tight clusters on orthogonal axes
    embeddings = nd.leaf(np.repeat(np.eye(2), 3, axis=0))
    labels = np.repeat([0, 1], 3)
    value = compute_loss(distance_matrix(embeddings), label_pairs(labels), LossConfig(loss=loss))
    assert value.value[0, 0] == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("loss", ["contrastive", "margin", "triplet"])
@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(loss, seed, gradcheck):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 2)
    selection = label_pairs(labels)
    config = LossConfig(loss=loss, contrastive_margin=1.0, margin_b=1.2)

    def op(x):
        return compute_loss(distance_matrix(nd.l2_normalize(x)), selection, config)

    assert gradcheck(op, [rng.normal(size=(6, 4))]) < 1e-4


def test_loss_errors():
    empty = PairSelection()
    with pytest.raises(LossError):
        contrastive_loss(hand_distances(), empty, m=0.5)
    with pytest.raises(LossError):
        margin_loss(hand_distances(), empty, b=1.0, m=0.25)
    with pytest.raises(LossError):
        triplet_loss(hand_distances(), make_triplets(empty), alpha=0.3)


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(loss="hinge")
    with pytest.raises(ConfigError):
        LossConfig(contrastive_margin=0.0)
    with pytest.raises(ConfigError):
        NegSamplingConfig(neg_count=0)


def distances_from_anchor(row):
    """Symmetric distances where only the anchor 0 row matters."""
    n = len(row)
    d = np.full((n, n), 1.0)
    d[0, :] = d[:, 0] = row
    np.fill_diagonal(d, 0.0)
    return d


def test_hard_keeps_nearest_negative_first(rng):
    distances = distances_from_anchor([0.0, 0.1, 0.9, 0.4])
    selection = PairSelection(positive_pairs=[(0, 1)], negative_pairs=[(0, 2), (0, 3)])
    picked = select_negatives(distances, selection, NegSamplingConfig("hard", neg_count=1), rng)
    assert picked.negative_pairs[0].tolist() == [0, 3]


@pytest.mark.parametrize(
    "row,expected",
    [
        # nearest negative farther than the positive
        ([0.0, 0.5, 0.3, 0.7, 1.1], 3),
        # all negatives closer: fall back to the farthest
        ([0.0, 1.5, 0.3, 1.1], 3),
    ],
)
def test_semi_hard_cases(row, expected, rng):
    distances = distances_from_anchor(row)
    negatives = [(0, j) for j in range(2, len(row))]
    selection = PairSelection(positive_pairs=[(0, 1)], negative_pairs=negatives)
    picked = select_negatives(distances, selection, NegSamplingConfig("semi_hard"), rng)
    assert picked.negative_pairs.tolist() == [[0, expected]]


def test_hinge_edges():
    d = nd.leaf([[0.0, 0.4, 0.3], [0.4, 0.0, 0.6], [0.3, 0.6, 0.0]])
    positive = PairSelection(positive_pairs=[(0, 1)])
    negative = PairSelection(negative_pairs=[(0, 2)])
    assert contrastive_loss(d, positive, m=0.5).value[0, 0] == pytest.approx(0.08)
    assert contrastive_loss(d, negative, m=0.5).value[0, 0] == pytest.approx(0.02)
    assert contrastive_loss(d, negative, m=0.3).value[0, 0] == 0.0
    # positive at D = b contributes m
    assert margin_loss(d, positive, b=0.4, m=0.25).value[0, 0] == pytest.approx(0.25)
    assert margin_loss(d, positive, b=0.8, m=0.25).value[0, 0] == 0.0
    assert triplet_loss(d, np.array([[0, 1, 2]]), alpha=0.3).value[0, 0] == pytest.approx(0.4)
    assert triplet_loss(d, np.array([[2, 0, 1]]), alpha=0.2).value[0, 0] == 0.0
