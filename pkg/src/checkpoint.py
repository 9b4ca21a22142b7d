"""
Binary tensor container used for checkpoints and incremental-state files.

Layout:
    b"MELS" | format version (u32 LE) | header length (u64 LE) | JSON header |
    tensor payloads (little-endian float32, in header order)

The header carries a `tensors` directory of {name, shape, offset, length}
entries, offsets relative to the start of the payload section. Everything is
written in a fixed order so that equal content gives byte-identical files.
"""
import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

import ndgrad as nd
from encoder import EncoderConfig, EncoderParams
from errors import CheckpointError, CompatibilityError
from ingest import Schema, Vocabulary
from utils.custom_logger import log

MAGIC = b"MELS"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
TENSOR_DTYPE = np.dtype("<f4")

PARAM_PREFIXES = ("emb.", "gru.")
BUFFER_PREFIX = "bn."
HEAD_PREFIX = "head."
OPTIMIZER_PREFIXES = ("adam.m.", "adam.v.")


def write_container(path: str, header: dict[str, Any], tensors: dict[str, np.ndarray]):
    directory = []
    payload = bytearray()
    for name, array in tensors.items():
        data = np.ascontiguousarray(array, dtype=TENSOR_DTYPE).tobytes()
        directory.append(
            {"name": name, "shape": list(array.shape), "offset": len(payload), "length": len(data)}
        )
        payload.extend(data)
    header = dict(header, tensors=directory)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    log.debug(f"Wrote {len(tensors)} tensors ({len(payload)} bytes) to {path}")


def read_container(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < PREAMBLE.size:
        raise CheckpointError(f"{path}: file too short for the preamble", offset=len(blob))
    magic, version, header_length = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise CompatibilityError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )

    start = PREAMBLE.size
    end = start + header_length
    if end > len(blob):
        raise CheckpointError(f"{path}: header runs past the end of the file", offset=len(blob))
    try:
        header = json.loads(blob[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})", offset=start) from e

    payload = memoryview(blob)[end:]
    tensors = {}
    consumed = 0
    for entry in header.pop("tensors", []):
        offset, length = entry["offset"], entry["length"]
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * TENSOR_DTYPE.itemsize
        if length != expected or offset + length > len(payload):
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} is truncated or malformed",
                offset=end + min(offset + length, len(payload)),
            )
        array = np.frombuffer(payload[offset : offset + length], dtype=TENSOR_DTYPE)
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(nd.get_dtype())
        consumed = max(consumed, offset + length)
    if consumed != len(payload):
        raise CheckpointError(
            f"{path}: {len(payload) - consumed} trailing bytes", offset=end + consumed
        )
    return header, tensors


@dataclass
class Checkpoint:
    """Everything needed to resume training or encode new data."""

    config: dict[str, Any]
    schema: dict[str, Any]
    vocabulary: dict[str, Any]
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def vocabulary_digest(self) -> str:
        return Vocabulary.from_dict(self.vocabulary).digest()

    def get_schema(self) -> Schema:
        return Schema.from_dict(self.schema)

    def get_vocabulary(self) -> Vocabulary:
        return Vocabulary.from_dict(self.vocabulary)

    def encoder_params(self) -> EncoderParams:
        """Rebuild encoder parameters (infer-ready) from the stored tensors."""
        encoder = EncoderConfig(**self.config["encoder"])
        layout = self.get_vocabulary().feature_layout()
        dtype = nd.get_dtype()
        tensors = {
            name: value.astype(dtype)
            for name, value in self.tensors.items()
            if name.startswith(PARAM_PREFIXES)
        }
        bn = None
        if f"{BUFFER_PREFIX}running_mean" in self.tensors:
            bn = nd.BatchNormState(
                running_mean=self.tensors[f"{BUFFER_PREFIX}running_mean"].astype(np.float64),
                running_var=self.tensors[f"{BUFFER_PREFIX}running_var"].astype(np.float64),
            )
        return EncoderParams(
            config=encoder,
            categorical_fields=[name for name, _ in layout.categorical],
            numerical_fields=list(layout.numerical),
            tensors=tensors,
            bn=bn,
        )


def save_checkpoint(path: str, checkpoint: Checkpoint):
    vocabulary = Vocabulary.from_dict(checkpoint.vocabulary)
    header = {
        "kind": "checkpoint",
        "config": checkpoint.config,
        "schema": checkpoint.schema,
        "vocabulary": checkpoint.vocabulary,
        "vocabulary_digest": vocabulary.digest(),
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "rng_state": checkpoint.rng_state,
        "extra": checkpoint.extra,
    }
    write_container(path, header, checkpoint.tensors)
    log.info(f"Saved checkpoint (epoch {checkpoint.epoch}) to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint (kind={header.get('kind')!r})", offset=0)
    checkpoint = Checkpoint(
        config=header["config"],
        schema=header["schema"],
        vocabulary=header["vocabulary"],
        tensors=tensors,
        epoch=header["epoch"],
        step=header["step"],
        rng_state=header["rng_state"],
        extra=header["extra"],
    )
    if checkpoint.vocabulary_digest != header["vocabulary_digest"]:
        raise CheckpointError(f"{path}: vocabulary digest does not match its header", offset=0)
    log.debug(f"Loaded checkpoint from {path}: epoch={checkpoint.epoch} step={checkpoint.step}")
    return checkpoint


@dataclass
class StateFile:
    """Raw recurrent states per person, for incremental updates."""

    vocabulary_digest: str
    hidden_size: int
    states: dict[str, np.ndarray]
    last_times: dict[str, int]
    labels: dict[str, int | None]


def save_states(path: str, state_file: StateFile):
    header = {
        "kind": "states",
        "vocabulary_digest": state_file.vocabulary_digest,
        "hidden_size": state_file.hidden_size,
        "last_times": state_file.last_times,
        "labels": state_file.labels,
    }
    write_container(path, header, state_file.states)
    log.info(f"Saved {len(state_file.states)} person states to {path}")


def load_states(path: str) -> StateFile:
    header, tensors = read_container(path)
    if header.get("kind") != "states":
        raise CheckpointError(f"{path} is not a state file (kind={header.get('kind')!r})", offset=0)
    for name, state in tensors.items():
        if state.shape != (header["hidden_size"],):
            raise CompatibilityError(
                f"{path}: state of {name!r} has shape {state.shape}, "
                f"expected ({header['hidden_size']},)"
            )
    return StateFile(
        vocabulary_digest=header["vocabulary_digest"],
        hidden_size=header["hidden_size"],
        states=tensors,
        last_times=header["last_times"],
        labels=header["labels"],
    )
