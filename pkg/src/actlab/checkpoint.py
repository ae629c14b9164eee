"""Versioned binary checkpoints.

Layout (all integers little-endian):

    8 bytes   magic "ACTLABC1"
    u32       format version (1)
    u32       length of the config digest, then that many bytes (sha256 hex)
    u32       length of the resolved config text, then that many utf-8 bytes
    u32       record count
    records   u16 name length + utf-8 name, u8 ndim, u32 per dim,
              then the row-major float64 payload
    u32       CRC32 of everything before it

Parameters are stored under "param/", Adam moments under "adam.m/" and
"adam.v/", the step counter under "adam/step". Round-tripping a checkpoint
reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .cells import CellParams
from .config import TrainConfig, config_digest, config_text, parse_config_text
from .optim import OptimizerState
from .tasks import task_spec

MAGIC = b"ACTLABC1"
VERSION = 1


class CheckpointError(ValueError):
    """Unusable checkpoint file: wrong magic/version, truncated, corrupt."""


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def save_checkpoint(path: str, params: CellParams, opt_state: OptimizerState,
                    config: TrainConfig) -> None:
    records = [("param/" + name, arr) for name, arr in params.items()]
    records += [("adam.m/" + name, arr) for name, arr in opt_state.m.items()]
    records += [("adam.v/" + name, arr) for name, arr in opt_state.v.items()]
    records.append(("adam/step", np.array(float(opt_state.step))))

    digest = config_digest(config).encode("ascii")
    text = config_text(config).encode("utf-8")
    body = MAGIC + struct.pack("<I", VERSION)
    body += struct.pack("<I", len(digest)) + digest
    body += struct.pack("<I", len(text)) + text
    body += struct.pack("<I", len(records))
    for name, arr in records:
        body += _pack_record(name, arr)
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> tuple[TrainConfig, CellParams, OptimizerState]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path!r} is not a checkpoint (bad magic)")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path!r} failed its checksum")

    reader = _Reader(payload)
    reader.take(len(MAGIC))
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = reader.take(reader.u32()).decode("ascii")
    text = reader.take(reader.u32()).decode("utf-8")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(struct.unpack("<H", reader.take(2))[0]).decode("utf-8")
        ndim = struct.unpack("<B", reader.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        arrays[name] = np.array(data)          # own, writable copy

    config = parse_config_text(text, origin=f"{path}:config")
    if config_digest(config) != digest:
        raise CheckpointError("config text does not match its stored digest")

    spec = task_spec(config.task)
    input_size = config.n_bits if config.task == "parity" else spec.input_size
    params = CellParams(config.cell, input_size, config.hidden, spec.output_size,
                        *(arrays["param/" + name]
                          for name in CellParams._FIELDS))
    params.validate()
    opt = OptimizerState(
        m={name: arrays["adam.m/" + name] for name in CellParams._FIELDS},
        v={name: arrays["adam.v/" + name] for name in CellParams._FIELDS},
        step=int(arrays["adam/step"]))
    return config, params, opt
