"""Versioned binary checkpoints with bit-exact round-trips.

Layout: an 8-byte magic, a u32 format version, a u32 record count, then one
length-prefixed record per entry and a closing end marker. Each record is

    u32 name length | name (utf-8) | u8 kind | u64 payload length | payload

with kind 0 = UTF-8 JSON, kind 1 = float64 array, kind 2 = int64 array.
Array payloads are a u32 ndim, u64 dims, then raw little-endian bytes.
Every read checks its expected length, so corruption or truncation raises
a checkpoint error naming the record that failed. Files are written to a
temp path and renamed into place, so a crash cannot leave a partial file
under the final name.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError
from .model import MoeLoraModel

MAGIC = b"MOELABCK"
FORMAT_VERSION = 1
_END = b"MOELABED"

_KIND_JSON = 0
_KIND_F64 = 1
_KIND_I64 = 2


@dataclass
class Checkpoint:
    """Everything needed to resume a run exactly.

    configs: dicts for the model, training, contrastive, and corpus settings
    step: number of completed optimizer steps
    params: trainable tensors by name
    opt_t: shared optimizer step count
    opt_arrays: first/second moments keyed like "3.m" / "3.v"
    queue_state: per layer, per expert (buffer, write_ptr, filled)
    """

    configs: dict
    step: int
    params: dict[str, np.ndarray]
    opt_t: int
    opt_arrays: dict[str, np.ndarray]
    queue_state: list[list[tuple[np.ndarray, int, int]]]


# -- low-level records -----------------------------------------------------------


def _write_record(f: BinaryIO, name: str, kind: int, payload: bytes) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", kind))
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)


def _array_payload(arr: np.ndarray) -> tuple[int, bytes]:
    if arr.dtype == np.float64:
        kind = _KIND_F64
    elif arr.dtype == np.int64:
        kind = _KIND_I64
    else:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return kind, head + np.ascontiguousarray(arr).tobytes()


def _take(f: BinaryIO, n: int, context: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"record {context}: wanted {n} bytes, file ended after {len(buf)}"
        )
    return buf


def _read_record(f: BinaryIO, index: int) -> tuple[str, int, bytes]:
    ctx = f"#{index}"
    (name_len,) = struct.unpack("<I", _take(f, 4, ctx))
    name = _take(f, name_len, ctx).decode("utf-8")
    ctx = f"#{index} ({name})"
    (kind,) = struct.unpack("<B", _take(f, 1, ctx))
    (payload_len,) = struct.unpack("<Q", _take(f, 8, ctx))
    return name, kind, _take(f, payload_len, ctx)


def _decode_array(name: str, kind: int, payload: bytes) -> np.ndarray:
    dtype = np.float64 if kind == _KIND_F64 else np.int64
    if len(payload) < 4:
        raise CheckpointError(f"record {name}: array header truncated")
    (ndim,) = struct.unpack("<I", payload[:4])
    head = 4 + 8 * ndim
    if len(payload) < head:
        raise CheckpointError(f"record {name}: shape header truncated")
    shape = struct.unpack(f"<{ndim}Q", payload[4:head])
    expect = int(np.prod(shape, dtype=np.int64)) * 8
    body = payload[head:]
    if len(body) != expect:
        raise CheckpointError(
            f"record {name}: payload holds {len(body)} bytes, shape {shape} needs {expect}"
        )
    return np.frombuffer(body, dtype=dtype).reshape(shape).copy()


# -- assembling state ---------------------------------------------------------------


def gather_checkpoint(model: MoeLoraModel, step: int, opt_t: int,
                      opt_arrays: dict[str, np.ndarray], configs: dict) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model.named_trainables()}
    queue_state = [
        [(q.buffer.copy(), q.write_ptr, q.filled) for q in layer_queues]
        for layer_queues in model.queues
    ]
    return Checkpoint(configs=configs, step=step, params=params, opt_t=opt_t,
                      opt_arrays={k: v.copy() for k, v in opt_arrays.items()},
                      queue_state=queue_state)


def apply_checkpoint(model: MoeLoraModel, ckpt: Checkpoint) -> None:
    """Load parameters and queue state into a freshly built model."""
    named = dict(model.named_trainables())
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise CheckpointError(f"parameter set mismatch, first difference: {missing[0]}")
    for name, tensor in named.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arr.shape} vs model {tensor.data.shape}"
            )
        tensor.data = arr.copy()
    for li, layer_queues in enumerate(model.queues):
        for ei, q in enumerate(layer_queues):
            buf, ptr, filled = ckpt.queue_state[li][ei]
            if buf.shape != q.buffer.shape:
                raise CheckpointError(
                    f"queue {li}/{ei}: buffer shape {buf.shape} vs model {q.buffer.shape}"
                )
            q.buffer = buf.copy()
            q.write_ptr = int(ptr)
            q.filled = int(filled)


# -- file io -----------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = os.fspath(path)
    records: list[tuple[str, int, bytes]] = []

    meta = {"step": ckpt.step, "opt_t": ckpt.opt_t, "configs": ckpt.configs,
            "queue_meta": [
                [(q[1], q[2]) for q in layer] for layer in ckpt.queue_state
            ]}
    records.append(("meta", _KIND_JSON, json.dumps(meta).encode("utf-8")))
    for name in sorted(ckpt.params):
        kind, payload = _array_payload(ckpt.params[name])
        records.append((f"param/{name}", kind, payload))
    for name in sorted(ckpt.opt_arrays):
        kind, payload = _array_payload(ckpt.opt_arrays[name])
        records.append((f"opt/{name}", kind, payload))
    for li, layer in enumerate(ckpt.queue_state):
        for ei, (buf, _ptr, _filled) in enumerate(layer):
            kind, payload = _array_payload(buf)
            records.append((f"queue/{li}/{ei}", kind, payload))

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(records)))
        for name, kind, payload in records:
            _write_record(f, name, kind, payload)
        f.write(_END)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with f:
        magic = _take(f, len(MAGIC), "header")
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _take(f, 4, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} not supported "
                f"(this build reads version {FORMAT_VERSION})"
            )
        (count,) = struct.unpack("<I", _take(f, 4, "header"))
        raw: dict[str, tuple[int, bytes]] = {}
        for i in range(count):
            name, kind, payload = _read_record(f, i)
            raw[name] = (kind, payload)
        tail = f.read(len(_END))
        if tail != _END:
            raise CheckpointError("record end-marker: missing or corrupt")

    if "meta" not in raw:
        raise CheckpointError("record meta: absent")
    meta = json.loads(raw["meta"][1].decode("utf-8"))

    params: dict[str, np.ndarray] = {}
    opt_arrays: dict[str, np.ndarray] = {}
    queues: dict[tuple[int, int], np.ndarray] = {}
    for name, (kind, payload) in raw.items():
        if name == "meta":
            continue
        arr = _decode_array(name, kind, payload)
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("opt/"):
            opt_arrays[name[len("opt/"):]] = arr
        elif name.startswith("queue/"):
            _, li, ei = name.split("/")
            queues[(int(li), int(ei))] = arr
        else:
            raise CheckpointError(f"record {name}: unknown section")

    queue_meta = meta["queue_meta"]
    queue_state = []
    for li, layer in enumerate(queue_meta):
        row = []
        for ei, (ptr, filled) in enumerate(layer):
            if (li, ei) not in queues:
                raise CheckpointError(f"record queue/{li}/{ei}: absent")
            row.append((queues[(li, ei)], int(ptr), int(filled)))
        queue_state.append(row)

    return Checkpoint(configs=meta["configs"], step=int(meta["step"]),
                      params=params, opt_t=int(meta["opt_t"]),
                      opt_arrays=opt_arrays, queue_state=queue_state)
