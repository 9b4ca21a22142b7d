import numpy as np
import pytest
from numpy.testing import assert_allclose

import ndgrad as nd
from errors import BatchError, BoundsError, ContractError, ShapeError

pytestmark = pytest.mark.usefixtures("float64")

SEEDS = range(20)
OP_TOLERANCE = 1e-4


def away_from_zero(rng, shape, margin=0.2):
    values = rng.normal(size=shape)
    return np.sign(values) * (np.abs(values) + margin)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed, gradcheck):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    for op in (nd.sigmoid, nd.tanh, nd.one_minus, nd.square, nd.transpose, nd.mean_all):
        assert gradcheck(op, [x]) < OP_TOLERANCE, op.__name__
    assert gradcheck(nd.relu, [away_from_zero(rng, (3, 4))]) < OP_TOLERANCE
    assert gradcheck(lambda a: nd.scale(a, -2.5, 1.0), [x]) < OP_TOLERANCE
    positive = rng.uniform(0.5, 2.0, (3, 4))
    assert gradcheck(lambda a: nd.sqrt_floor(a, 1e-12), [positive]) < OP_TOLERANCE
    for op in (nd.add, nd.sub, nd.mul_elem):
        assert gradcheck(op, [x, y]) < OP_TOLERANCE, op.__name__


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed, gradcheck):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert gradcheck(nd.matmul, [a, b]) < OP_TOLERANCE
    assert gradcheck(nd.add, [a, rng.normal(size=(1, 4))]) < OP_TOLERANCE
    c = rng.normal(size=(3, 2))
    assert gradcheck(lambda p, q: nd.concat_cols([p, q]), [a, c]) < OP_TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_indexing_gradients(seed, gradcheck):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(5, 3))
    rows = np.array([0, 4, 4, 2, 0])
    assert gradcheck(lambda t: nd.gather_rows(t, rows), [table]) < OP_TOLERANCE
    cols = np.array([1, 0, 2, 2, 1])
    assert gradcheck(lambda t: nd.take_elements(t, rows, cols), [table]) < OP_TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_normalization_gradients(seed, gradcheck):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3)) * 2 + 1

    def train_mode(a):
        state = nd.BatchNormState(np.zeros(3), np.ones(3))
        return nd.batch_norm(a, state, "train")

    def infer_mode(a):
        state = nd.BatchNormState(np.full(3, 0.5), np.full(3, 2.0))
        return nd.batch_norm(a, state, "infer")

    assert gradcheck(train_mode, [x]) < OP_TOLERANCE
    assert gradcheck(infer_mode, [x]) < OP_TOLERANCE
    assert gradcheck(nd.l2_normalize, [x]) < OP_TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed, gradcheck):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=5)
    logits = rng.normal(size=(5, 4))
    assert gradcheck(lambda z: nd.softmax_cross_entropy(z, labels), [logits]) < OP_TOLERANCE


def test_cross_entropy_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    labels = np.array([1, 2])
    loss = nd.softmax_cross_entropy(nd.leaf(logits), labels).value[0, 0]
    log_p = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-(log_p[0, 1] + log_p[1, 2]) / 2)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = nd.leaf([[1.0, -2.0, 3.0]])
    y = nd.square(x)
    loss = nd.sum_all(y)
    nd.backward(loss)
    nd.backward(loss)
    assert_allclose(x.grad, 2 * 2 * x.value)
    assert_allclose(y.grad, np.ones((1, 3)))


def test_shared_input_receives_both_contributions():
    x = nd.leaf([[1.5, -0.5]])
    nd.backward(nd.sum_all(nd.mul_elem(x, x)))
    assert_allclose(x.grad, 2 * x.value)


def test_long_chain_does_not_recurse():
    x = nd.leaf([[1.0]])
    y = x
    for _ in range(5000):
        y = nd.scale(y, 1.0, 0.001)
    nd.backward(nd.sum_all(y))
    assert x.grad[0, 0] == pytest.approx(1.0)
    assert y.value[0, 0] == pytest.approx(6.0)


def test_topological_order_visits_each_node_once():
    x = nd.leaf([[1.0]])
    a = nd.square(x)
    b = nd.add(a, x)
    c = nd.mul_elem(b, a)
    order = nd.topological_order(c)
    assert len(order) == len({id(n) for n in order}) == 4
    assert order.index(x) < order.index(a) < order.index(b) < order.index(c)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        nd.backward(nd.leaf(np.ones((2, 2))))


def test_shape_contracts():
    with pytest.raises(ShapeError):
        nd.matmul(nd.leaf(np.ones((2, 3))), nd.leaf(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        nd.add(nd.leaf(np.ones((2, 3))), nd.leaf(np.ones((2, 2))))
    with pytest.raises(ShapeError):
        nd.concat_cols([nd.leaf(np.ones((2, 3))), nd.leaf(np.ones((3, 3)))])
    with pytest.raises(BoundsError):
        nd.gather_rows(nd.leaf(np.ones((3, 2))), np.array([0, 3]))


def test_sqrt_floor_clamps_without_gradient():
    x = nd.leaf([[0.0, 4.0, 9.0]])
    y = nd.sqrt_floor(x, 1e-12, ceiling=4.0)
    assert_allclose(y.value, [[1e-6, 2.0, 2.0]])
    nd.backward(nd.sum_all(y))
    assert_allclose(x.grad, [[0.0, 0.25, 0.0]])


def test_batch_norm_updates_running_statistics():
    x = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]])
    state = nd.BatchNormState(np.zeros(2), np.ones(2))
    out = nd.batch_norm(nd.leaf(x), state, "train", eps=0.0, momentum=0.1)
    assert_allclose(out.value.mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(out.value.var(axis=0), 1.0)
    assert_allclose(state.running_mean, 0.1 * x.mean(axis=0))
    assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batch_norm_infer_uses_running_statistics():
    state = nd.BatchNormState(np.array([1.0]), np.array([4.0]))
    out = nd.batch_norm(nd.leaf([[3.0], [5.0]]), state, "infer", eps=0.0)
    assert_allclose(out.value, [[1.0], [2.0]])
    assert_allclose(state.running_mean, [1.0])


def test_batch_norm_contracts():
    state = nd.BatchNormState(np.zeros(1), np.ones(1))
    with pytest.raises(BatchError):
        nd.batch_norm(nd.leaf([[1.0]]), state, "train")
    with pytest.raises(ContractError):
        nd.batch_norm(nd.leaf([[1.0], [2.0]]), state, "eval")


def test_l2_normalize_gives_unit_rows():
    x = nd.leaf(np.random.default_rng(1).normal(size=(5, 7)))
    assert_allclose(nd.row_norms(nd.l2_normalize(x).value), np.ones(5))


def test_precision_switch():
    with nd.precision(np.float32):
        assert nd.leaf([1.0, 2.0]).value.dtype == np.float32
    assert nd.leaf([1.0]).value.dtype == np.float64


def test_small_values():
    assert nd.matmul(nd.leaf([[1.0, 2.0]]), nd.leaf([[3.0], [4.0]])).value[0, 0] == 11.0
    assert nd.sigmoid(nd.leaf([[0.0]])).value[0, 0] == 0.5
    assert_allclose(nd.l2_normalize(nd.leaf([[3.0, 4.0]])).value, [[0.6, 0.8]])
    state = nd.BatchNormState(np.zeros(1), np.ones(1))
    assert_allclose(nd.batch_norm(nd.leaf([[2.0], [2.0]]), state, "train").value, 0.0)
    state = nd.BatchNormState(np.array([5.0]), np.array([4.0]))
    assert nd.batch_norm(nd.leaf([[7.0]]), state, "infer", eps=0.0).value[0, 0] == 1.0


def test_gather_rows_scatters_gradients():
    table = nd.leaf(np.arange(6.0).reshape(3, 2))
    rows = nd.gather_rows(table, np.array([0, 0, 2]))
    nd.backward(nd.sum_all(nd.mul_elem(rows, nd.leaf([[1.0, 1.0], [2.0, 2.0], [5.0, 5.0]]))))
    assert_allclose(table.grad, [[3.0, 3.0], [0.0, 0.0], [5.0, 5.0]])
