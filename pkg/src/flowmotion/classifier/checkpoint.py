"""Versioned binary checkpoint: JSON header followed by named f32 tensors.

Layout (all integers little-endian)::

    b"FMCK"  u16 version  u32 header_len  header (UTF-8 JSON)
    u32 n_tensors
    n_tensors x [u16 name_len, name, u8 ndim, ndim x u32 dims, f32 payload]
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..errors import CheckpointError
from .network import ModelParams, NetConfig

MAGIC = b"FMCK"
VERSION = 1

_GROUPS = ("weights", "buffers", "momentum")


def encode_tensors(header: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(data):
                raise CheckpointError(f"tensor {name} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return header, tensors


def dumps(
    params: ModelParams,
    momentum: Optional[Dict[str, np.ndarray]] = None,
    extra: Optional[dict] = None,
) -> bytes:
    header = {"format": "flowmotion-checkpoint", "net": params.config.to_dict()}
    if extra:
        header.update(extra)
    tensors: Dict[str, np.ndarray] = {}
    for group, items in zip(_GROUPS, (params.weights, params.buffers, momentum or {})):
        for name, arr in items.items():
            tensors[f"{group}/{name}"] = arr
    return encode_tensors(header, tensors)


def loads(data: bytes) -> Tuple[ModelParams, Dict[str, np.ndarray], dict]:
    """Inverse of :func:`dumps`; returns ``(params, momentum, header)``."""
    header, tensors = decode_tensors(data)
    groups: Dict[str, Dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for key, arr in tensors.items():
        group, _, name = key.partition("/")
        if group not in groups:
            raise CheckpointError(f"unknown tensor group in {key!r}")
        groups[group][name] = arr
    params = ModelParams(NetConfig.from_dict(header["net"]), groups["weights"], groups["buffers"])
    return params, groups["momentum"], header


def save(path: Union[str, Path], params: ModelParams, momentum=None, extra=None) -> None:
    Path(path).write_bytes(dumps(params, momentum, extra))


def load(path: Union[str, Path]) -> Tuple[ModelParams, Dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
