"""Portable tensor files and checkpoint manifests.

File layout ("TFT1"): 4 magic bytes, unsigned 32-bit little-endian rank,
one unsigned 32-bit little-endian extent per dimension, then the values as
32-bit little-endian floats in row-major order. Internal float64 values are
rounded to float32 on export.

A checkpoint is a directory with one .tft file per named parameter plus a
manifest.json recording the parameter list and the experiment config hash.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"TFT1"
MANIFEST_NAME = "manifest.json"


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", array.ndim)
    for extent in array.shape:
        payload += struct.pack("<I", extent)
    payload += np.ascontiguousarray(array, dtype="<f4").tobytes()
    _atomic_write(Path(path), bytes(payload))


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a TFT1 tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if values.size != count:
        raise ValueError(f"{path}: truncated tensor payload")
    return values.astype(np.float64).reshape(shape)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _param_filename(name: str) -> str:
    return name.replace("/", "_").replace(".", "_") + ".tft"


def save_checkpoint(directory: str | Path, params, config_text: str,
                    config_hash: str, extra: dict | None = None) -> None:
    """Write one tensor file per parameter plus a manifest, atomically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for p in params:
        fname = _param_filename(p.name)
        if fname in entries.values():
            raise ValueError(f"duplicate parameter file name for {p.name!r}")
        write_tensor(directory / fname, p.data)
        entries[p.name] = fname
    manifest = {
        "format": "TFT1-checkpoint",
        "config_hash": config_hash,
        "config": config_text,
        "parameters": entries,
    }
    if extra:
        manifest.update(extra)
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode()
    _atomic_write(directory / MANIFEST_NAME, payload)


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory: str | Path, params) -> None:
    """Load parameter values in place; shapes and names must match."""
    directory = Path(directory)
    manifest = load_manifest(directory)
    entries = manifest["parameters"]
    for p in params:
        if p.name not in entries:
            raise ValueError(f"checkpoint is missing parameter {p.name!r}")
        values = read_tensor(directory / entries[p.name])
        if values.shape != p.data.shape:
            raise ValueError(f"parameter {p.name!r}: checkpoint shape {values.shape} "
                             f"does not match model shape {p.data.shape}")
        p.data = values
