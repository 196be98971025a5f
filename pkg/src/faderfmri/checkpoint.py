"""Single-file model checkpoints.

Layout::

    b"FDCK" | u32 version | u32 header_len | header JSON (utf-8) | blobs

The JSON header holds the model kind, its configuration echo and, for each
named tensor, its shape and byte offset into the blob section. Blobs are
little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"FDCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(path, kind: str, config: dict, state: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name]
        if torch.is_tensor(arr):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "config": config, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return ``(kind, config, {name: float32 ndarray})``."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _PREFIX.size:
        raise FormatError(f"{path}: not a checkpoint (too short)")
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size : _PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    base = _PREFIX.size + hlen
    state = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * n > len(buf):
            raise FormatError(f"{path}: tensor {e['name']} runs past end of file")
        state[e["name"]] = np.frombuffer(buf, dtype="<f4", count=n, offset=start).reshape(e["shape"]).copy()
    return header["kind"], header["config"], state


def state_to_numpy(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_into(module: torch.nn.Module, state: dict) -> None:
    current = module.state_dict()
    converted = {}
    for k, v in current.items():
        if k not in state:
            raise FormatError(f"checkpoint is missing tensor {k}")
        converted[k] = torch.as_tensor(state[k]).to(v.dtype).reshape(v.shape)
    module.load_state_dict(converted)
