"""Binary model checkpoints.

Layout: ``LACK`` magic, uint32 version, uint32 header length, a sorted-key
JSON header (encoder config, class counts, parameter names and shapes, free
metadata), then every parameter as little-endian float64 in header order.
Identical weights always serialise to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import encoder_from_dict, to_dict
from .errors import FormatError
from .training import Model, init_model

MAGIC = b"LACK"
VERSION = 1


def dumps(model: Model, meta=None) -> bytes:
    named = model.named_parameters()
    header = {
        "encoder": to_dict(model.config),
        "n_intents": model.head.n_intents,
        "n_speakers": model.head.n_speakers,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named]
    return b"".join(parts)


def save_checkpoint(path, model: Model, meta=None) -> None:
    Path(path).write_bytes(dumps(model, meta))


def loads(data: bytes) -> tuple[Model, dict]:
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", offset=len(data))
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("corrupt checkpoint header", offset=12) from None
    config = encoder_from_dict(header["encoder"])
    model = init_model(config, header["n_intents"], header["n_speakers"], 0)
    named = dict(model.named_parameters())
    offset = 12 + hlen
    for spec in header["params"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in named or named[name].shape != shape:
            raise FormatError(f"parameter {name!r} does not fit the stored config", offset=offset)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"truncated data for {name!r}", offset=offset)
        named[name].data[...] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        offset += nbytes
    if len(header["params"]) != len(named):
        raise FormatError("checkpoint is missing parameters", offset=offset)
    if offset != len(data):
        raise FormatError("trailing bytes after parameters", offset=offset)
    return model, header["meta"]


def load_checkpoint(path) -> tuple[Model, dict]:
    return loads(Path(path).read_bytes())
