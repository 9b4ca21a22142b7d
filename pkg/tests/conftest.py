import numpy as np
import pytest

import ndgrad as nd
from config import TrainConfig
from ingest import SynthConfig, generate_synthetic, synthetic_schema


@pytest.fixture
def float64():
    """Run the array core in 64-bit mode for the duration of a test."""
    with nd.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def finite_difference_error(op, inputs, eps=1e-6, seed=123) -> float:
    """
    Largest relative error between the gradients `backward` assigns to the
    inputs of `op` and central differences. The output of `op` is reduced to
    a scalar with fixed random weights so every output entry matters.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    nodes = [nd.Node(x.copy()) for x in inputs]
    out = op(*nodes)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    nd.backward(nd.sum_all(nd.mul_elem(out, nd.Node(weights))))

    def evaluate(values):
        return float((op(*[nd.Node(v) for v in values]).value * weights).sum())

    errors = []
    for k, x in enumerate(inputs):
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            values = [v.copy() for v in inputs]
            values[k][idx] += eps
            up = evaluate(values)
            values[k][idx] -= 2 * eps
            down = evaluate(values)
            numeric[idx] = (up - down) / (2 * eps)
        errors.append(relative_error(nodes[k].grad, numeric))
    return max(errors)


@pytest.fixture
def gradcheck():
    return finite_difference_error


@pytest.fixture(scope="session")
def small_dataset():
    """40 labelled synthetic persons with 30-60 events each."""
    config = SynthConfig(n_persons=40, n_classes=2, events_per_person=(30, 60), seed=3)
    return generate_synthetic(config)


@pytest.fixture(scope="session")
def schema():
    return synthetic_schema()


def tiny_train_config(**train_settings) -> TrainConfig:
    settings = {"batch_persons": 8, "epochs": 2, "sub_samples": 2}
    settings.update(train_settings)
    return TrainConfig.from_dict(
        {
            "encoder": {"hidden_size": 8},
            "pairing": {"min_length": 5, "max_length": 15},
            "train": settings,
        }
    )


@pytest.fixture(scope="session")
def train_config():
    """Factory for a fast configuration: hidden size 8, batches of 8 persons, 2 epochs."""
    return tiny_train_config
