"""Binary checkpoint format.

Layout: 8 magic bytes ``FCNSCKPT``, a 4-byte little-endian header length, a
UTF-8 JSON header ``{format_version, net_config, params}`` where ``params``
maps each name to ``{shape, dtype: "f32", offset, length}`` (offset and
length in bytes, relative to the start of the data section), then the raw
little-endian IEEE-754 32-bit data, arrays in header order, C-contiguous.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError
from .config import NetConfig
from .model import ParameterSet, parameter_spec

MAGIC = b"FCNSCKPT"
FORMAT_VERSION = 1


def save_checkpoint(params: ParameterSet, config: NetConfig, path: str | Path) -> None:
    """Write parameters in canonical order; float32 is enforced at the door."""
    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name, shape in parameter_spec(config):
        if name not in params:
            raise CheckpointFormatError(f"parameter set is missing {name}")
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointFormatError(
                f"{name} has shape {arr.shape}, config implies {shape}"
            )
        raw = arr.tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "net_config": config.to_json_dict(),
            "params": entries,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, NetConfig]:
    """Read a checkpoint; bit-identical inverse of :func:`save_checkpoint`."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointFormatError(f"{path}: file too short for a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(blob):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported format_version {header.get('format_version')}"
        )
    config = NetConfig.from_json_dict(header["net_config"])
    data = blob[header_start + header_len :]

    expected = dict(parameter_spec(config))
    entries = header["params"]
    missing = sorted(set(expected) - set(entries))
    if missing:
        raise CheckpointFormatError(f"{path}: header missing parameters {missing[:5]}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_spec(config):
        entry = entries[name]
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError(f"{path}: {name} has dtype {entry.get('dtype')}")
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointFormatError(
                f"{path}: {name} header shape {entry['shape']} != expected {list(shape)}"
            )
        nbytes = int(np.prod(shape)) * 4
        if entry["length"] != nbytes:
            raise CheckpointFormatError(
                f"{path}: {name} length {entry['length']} != shape size {nbytes}"
            )
        start, end = entry["offset"], entry["offset"] + nbytes
        if end > len(data):
            raise CheckpointFormatError(f"{path}: truncated data section at {name}")
        arrays[name] = (
            np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()
        )
    return ParameterSet(arrays), config
