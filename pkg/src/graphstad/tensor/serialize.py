"""Binary tensor blobs and parameter-set checkpoints.

Blob layout (little-endian): magic ``GSTN``, u32 version (1), u32 rank,
u32 extents[rank], u8 dtype code (0 = f32, 1 = f64), raw row-major data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .params import ParamSet

MAGIC = b"GSTN"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class BlobError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", code)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise BlobError("bad magic, not a GSTN tensor blob")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise BlobError(f"unsupported blob version {version}")
    off = 12
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (code,) = struct.unpack_from("<B", buf, off)
    off += 1
    if code not in _DTYPES:
        raise BlobError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise BlobError(f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".gstn"


def save_params(params: ParamSet, directory: str | Path, manifest: dict) -> None:
    """Write ``manifest.json`` plus one blob per parameter into ``directory``."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.items():
        fname = _blob_name(name)
        write_tensor(directory / "tensors" / fname, t.data)
        entries.append({"name": name, "shape": list(t.shape), "file": f"tensors/{fname}"})
    doc = dict(manifest)
    doc["parameters"] = entries
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_param_state(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    state = {}
    for entry in manifest["parameters"]:
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise BlobError(f"{entry['name']}: blob shape {arr.shape} != manifest {entry['shape']}")
        state[entry["name"]] = arr
    return state
