"""Versioned binary checkpoints.

Layout (little-endian)::

    b"ANYXCKPT" | u32 version | section* ; section = u64 length | payload

Sections in order: run config JSON, parameter table, first-moment table,
second-moment table, counters (u64 step, u64 optimizer step), generator state JSON.
A table is u32 count followed by (u32 name length, name, u32 rows, u32 cols, f8 data)
per entry, sorted by name.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Union

import numpy as np
from pydantic import ValidationError

from .config import RunConfig
from .errors import CheckpointError, ConfigError
from .harness import AdamState, TrainState, model_from_config
from .numerics import FloatArray, Rng

logger = logging.getLogger(__name__)

MAGIC = b"ANYXCKPT"
FORMAT_VERSION = 1
SECTIONS = ("config", "params", "adam_m", "adam_v", "counters", "rng")


@dataclass(frozen=True)
class Checkpoint:
    config: RunConfig
    state: TrainState


def _table(arrays: Mapping[str, FloatArray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CheckpointError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def _read_table(payload: bytes, what: str) -> dict[str, FloatArray]:
    reader = _Reader(payload, what)
    (count,) = reader.unpack("<I")
    arrays: dict[str, FloatArray] = {}
    for _ in range(count):
        (length,) = reader.unpack("<I")
        raw = reader.take(length)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} entry name is not valid UTF-8: {raw!r}") from None
        rows, cols = reader.unpack("<II")
        arrays[name] = np.frombuffer(reader.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    reader.done()
    return arrays


def encode(config: RunConfig, state: TrainState) -> bytes:
    sections = [
        config.to_json().encode("utf-8"),
        _table(state.params),
        _table(state.optimizer.m),
        _table(state.optimizer.v),
        struct.pack("<QQ", state.step, state.optimizer.t),
        json.dumps(state.rng.get_state(), sort_keys=True).encode("utf-8"),
    ]
    body = b"".join(struct.pack("<Q", len(payload)) + payload for payload in sections)
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + body


def _check_shapes(expected: Mapping[str, tuple[int, int]], arrays: Mapping[str, FloatArray], what: str) -> None:
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{what} names differ from the model (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"{what} {name!r} has shape {arrays[name].shape}, model expects {shape}")


def decode(data: bytes) -> Checkpoint:
    reader = _Reader(data, "checkpoint")
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an anyexperts checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads {FORMAT_VERSION}")
    payloads = {}
    for name in SECTIONS:
        (length,) = reader.unpack("<Q")
        payloads[name] = reader.take(length)
    reader.done()

    try:
        config = RunConfig.model_validate_json(payloads["config"])
    except ValidationError as exc:
        raise CheckpointError(f"stored run config is invalid: {exc.errors()[0]['msg']}") from None
    model = model_from_config(config)
    shapes = model.parameter_shapes()
    params = _read_table(payloads["params"], "parameter table")
    m = _read_table(payloads["adam_m"], "first-moment table")
    v = _read_table(payloads["adam_v"], "second-moment table")
    for what, arrays in (("parameter", params), ("first moment", m), ("second moment", v)):
        _check_shapes(shapes, arrays, what)
    counters = _Reader(payloads["counters"], "counters")
    step, adam_t = counters.unpack("<QQ")
    counters.done()
    try:
        rng = Rng.from_state(json.loads(payloads["rng"].decode("utf-8")))
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"stored generator state is invalid: {exc}") from None
    state = TrainState(model=model, params=params, optimizer=AdamState(m=m, v=v, t=adam_t), step=step, rng=rng)
    return Checkpoint(config=config, state=state)


def save_checkpoint(path: Union[str, Path], config: RunConfig, state: TrainState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(config, state))
    logger.info("wrote checkpoint %s (step %d)", path, state.step)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(data)
