"""
Event encoder and GRU sequence encoder.

The event encoder maps every event to a vector by looking up one embedding
table per categorical attribute, batch-normalizing the numerical attributes
and concatenating the parts. The sequence encoder folds a GRU over the event
vectors; the last hidden state is the raw sequence state and its unit-norm
view is the published embedding.

Sequences in a batch are right-padded: a row stops updating once its
sequence has ended, so batching never changes a sequence's result.
"""
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

import ndgrad as nd
from errors import InputError, ShapeError, StateError
from ingest import EncodedSequence, FeatureLayout
from utils.config_fields import require
from utils.custom_logger import log

GATES = ("z", "r", "h")
MAX_DEFAULT_WIDTH = 16


@dataclass
class EncoderConfig:
    embedding_widths: dict[str, int] = field(default_factory=dict)
    hidden_size: int = 256
    bn_eps: float = nd.BN_EPS
    bn_momentum: float = nd.BN_MOMENTUM
    max_length: int = 1000

    def __post_init__(self):
        require(self.hidden_size >= 1, f"hidden_size must be >= 1, got {self.hidden_size}")
        require(self.max_length >= 1, f"max_length must be >= 1, got {self.max_length}")
        require(self.bn_eps > 0, f"bn_eps must be > 0, got {self.bn_eps}")
        require(0 < self.bn_momentum <= 1, f"bn_momentum must be in (0, 1], got {self.bn_momentum}")
        for name, width in self.embedding_widths.items():
            require(width >= 1, f"embedding width of {name!r} must be >= 1, got {width}")

    def width_for(self, name: str, cardinality: int) -> int:
        default = min(math.ceil(cardinality / 2), MAX_DEFAULT_WIDTH)
        return self.embedding_widths.get(name, max(default, 1))


@dataclass
class EncoderParams:
    """
    Learnable tensors of the event and sequence encoders plus the batch-norm
    running statistics. Tensor names: `emb.<field>`, `gru.W_<g>`, `gru.U_<g>`,
    `gru.b_<g>` for gates g in (z, r, h).
    """

    config: EncoderConfig
    categorical_fields: list[str]
    numerical_fields: list[str]
    tensors: dict[str, np.ndarray]
    bn: nd.BatchNormState | None

    @property
    def hidden_size(self) -> int:
        return self.tensors["gru.U_z"].shape[0]

    @property
    def input_width(self) -> int:
        return self.tensors["gru.W_z"].shape[0]

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def copy(self) -> "EncoderParams":
        bn = None
        if self.bn is not None:
            bn = nd.BatchNormState(self.bn.running_mean.copy(), self.bn.running_var.copy())
        return EncoderParams(
            config=self.config,
            categorical_fields=list(self.categorical_fields),
            numerical_fields=list(self.numerical_fields),
            tensors={k: v.copy() for k, v in self.tensors.items()},
            bn=bn,
        )


def init_params(
    layout: FeatureLayout, config: EncoderConfig, rng: np.random.Generator
) -> EncoderParams:
    """Uniform +-sqrt(1/fan_in) matrices, zero biases, +-0.1 embedding tables."""
    dtype = nd.get_dtype()
    tensors: dict[str, np.ndarray] = {}
    input_width = 0
    for name, cardinality in layout.categorical:
        width = config.width_for(name, cardinality)
        tensors[f"emb.{name}"] = rng.uniform(-0.1, 0.1, size=(cardinality, width)).astype(dtype)
        input_width += width
    input_width += len(layout.numerical)

    d = config.hidden_size
    for gate in GATES:
        bound = math.sqrt(1.0 / input_width)
        tensors[f"gru.W_{gate}"] = rng.uniform(-bound, bound, size=(input_width, d)).astype(dtype)
        bound = math.sqrt(1.0 / d)
        tensors[f"gru.U_{gate}"] = rng.uniform(-bound, bound, size=(d, d)).astype(dtype)
        tensors[f"gru.b_{gate}"] = np.zeros((1, d), dtype=dtype)

    bn = None
    if layout.numerical:
        bn = nd.BatchNormState(
            running_mean=np.array(layout.numerical_mean, dtype=np.float64),
            running_var=np.array(layout.numerical_var, dtype=np.float64),
        )
    log.debug(f"Initialized encoder: {input_width=} hidden_size={d}")
    return EncoderParams(
        config=config,
        categorical_fields=[name for name, _ in layout.categorical],
        numerical_fields=list(layout.numerical),
        tensors=tensors,
        bn=bn,
    )


def param_nodes(params: EncoderParams) -> dict[str, nd.Node]:
    return {name: nd.Node(value) for name, value in params.tensors.items()}


def encode_events(
    categorical: np.ndarray,
    numerical: np.ndarray,
    params: EncoderParams,
    nodes: dict[str, nd.Node],
    mode: str,
) -> nd.Node:
    """z_t = e(x_t) for a block of event rows, parts in schema field order."""
    parts = []
    for col, name in enumerate(params.categorical_fields):
        parts.append(nd.gather_rows(nodes[f"emb.{name}"], categorical[:, col]))
    if params.numerical_fields:
        assert params.bn is not None
        raw = nd.leaf(numerical, dtype=nd.get_dtype())
        parts.append(
            nd.batch_norm(raw, params.bn, mode, params.config.bn_eps, params.config.bn_momentum)
        )
    return nd.concat_cols(parts)


def _gru_step(
    h: nd.Node, x_z: nd.Node, x_r: nd.Node, x_h: nd.Node, nodes: dict[str, nd.Node]
) -> nd.Node:
    u = nd.sigmoid(nd.add(nd.add(x_z, nd.matmul(h, nodes["gru.U_z"])), nodes["gru.b_z"]))
    r = nd.sigmoid(nd.add(nd.add(x_r, nd.matmul(h, nodes["gru.U_r"])), nodes["gru.b_r"]))
    gated = nd.matmul(nd.mul_elem(r, h), nodes["gru.U_h"])
    candidate = nd.tanh(nd.add(nd.add(x_h, gated), nodes["gru.b_h"]))
    return nd.add(nd.mul_elem(nd.one_minus(u), h), nd.mul_elem(u, candidate))


def gru_cell(h: nd.Node, z_in: nd.Node, nodes: dict[str, nd.Node]) -> nd.Node:
    """
    u  = sigmoid(z W_z + h U_z + b_z)
    r  = sigmoid(z W_r + h U_r + b_r)
    h~ = tanh(z W_h + (r * h) U_h + b_h)
    h' = (1 - u) * h + u * h~
    """
    d = nodes["gru.U_z"].shape[0]
    if h.shape[1] != d or z_in.shape[1] != nodes["gru.W_z"].shape[0] or h.shape[0] != z_in.shape[0]:
        raise ShapeError(f"gru_cell: h {h.shape} and z {z_in.shape} do not fit the parameters")
    x_z, x_r, x_h = (nd.matmul(z_in, nodes[f"gru.W_{g}"]) for g in GATES)
    return _gru_step(h, x_z, x_r, x_h, nodes)


def encode_batch(
    sequences: Sequence[EncodedSequence],
    params: EncoderParams,
    nodes: dict[str, nd.Node],
    mode: str,
    initial_state: np.ndarray | None = None,
    truncate: bool = True,
) -> nd.Node:
    """
    Fold the GRU over every sequence and return the raw final states [B x d].

    Sequences longer than `max_length` keep their most recent events unless
    `truncate` is off (incremental updates never truncate).
    """
    if not sequences or any(len(s) == 0 for s in sequences):
        raise InputError("cannot encode an empty sequence")
    if truncate:
        sequences = [s.tail(params.config.max_length) for s in sequences]

    lengths = np.array([len(s) for s in sequences])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    categorical = np.concatenate([s.categorical for s in sequences])
    numerical = np.concatenate([s.numerical for s in sequences])

    events = encode_events(categorical, numerical, params, nodes, mode)
    # Input projections for all events at once; steps only gather their rows
    x_z, x_r, x_h = (nd.matmul(events, nodes[f"gru.W_{g}"]) for g in GATES)

    batch, d = len(sequences), params.hidden_size
    if initial_state is None:
        h = nd.leaf(np.zeros((batch, d)))
    else:
        if initial_state.shape != (batch, d):
            raise StateError(
                f"state of shape {initial_state.shape} does not fit hidden size {d}"
            )
        h = nd.leaf(initial_state)

    for t in range(int(lengths.max())):
        active = lengths > t
        rows = offsets + np.minimum(t, lengths - 1)
        h_new = _gru_step(
            h,
            nd.gather_rows(x_z, rows),
            nd.gather_rows(x_r, rows),
            nd.gather_rows(x_h, rows),
            nodes,
        )
        if active.all():
            h = h_new
        else:
            mask = nd.leaf(np.repeat(active[:, None], d, axis=1))
            h = nd.add(nd.mul_elem(mask, h_new), nd.mul_elem(nd.one_minus(mask), h))
    return h


def unit_rows(states: np.ndarray) -> np.ndarray:
    """Unit-norm view of raw states (the published embeddings)."""
    norms = nd.row_norms(states)
    return states / np.maximum(norms, nd.NORM_EPS)[:, None]


def encode_sequence(
    seq: EncodedSequence, params: EncoderParams, mode: str = "infer"
) -> tuple[np.ndarray, np.ndarray]:
    """Return (embedding, raw state) of one sequence."""
    if len(seq) == 0:
        raise InputError(f"sequence of person {seq.person_id!r} is empty")
    state = encode_batch([seq], params, param_nodes(params), mode).value
    return unit_rows(state)[0], state[0]


def encode_many(
    sequences: Sequence[EncodedSequence], params: EncoderParams, chunk_size: int = 256
) -> np.ndarray:
    """Infer-mode raw states for many sequences, encoded in chunks."""
    nodes = param_nodes(params)
    states = [
        encode_batch(sequences[i : i + chunk_size], params, nodes, "infer").value
        for i in range(0, len(sequences), chunk_size)
    ]
    return np.concatenate(states) if states else np.zeros((0, params.hidden_size))


def incremental_update(
    state: np.ndarray, new_events: EncodedSequence | None, params: EncoderParams
) -> tuple[np.ndarray, np.ndarray]:
    """
    Continue the recurrent fold from a stored raw state (infer mode).

    Equivalent to re-encoding the whole history followed by the new events,
    as long as the history was not truncated.
    """
    state = np.asarray(state, dtype=nd.get_dtype())
    if state.shape != (params.hidden_size,):
        raise StateError(
            f"state of shape {state.shape} does not match hidden size {params.hidden_size}"
        )
    if new_events is None or len(new_events) == 0:
        return unit_rows(state[None, :])[0], state
    h = encode_batch(
        [new_events], params, param_nodes(params), "infer", state[None, :], truncate=False
    ).value
    return unit_rows(h)[0], h[0]
