"""Tagged binary containers for artifacts, checkpoints, and flow files.

Container layout (used for caption artifacts and train checkpoints):

    magic (4 bytes) | version u16 LE | manifest length u32 LE |
    manifest JSON (utf-8) | array payloads back to back

The manifest records array names, shapes, and dtypes plus a free-form
``meta`` dict; payloads are little-endian and float32 unless noted.

Flow files ("CFTF") use a fixed header instead of a manifest:

    "CFTF" | version u16 | T u32 | H u32 | W u32 |
    u-plane float32 LE (frame-major, row-major) | v-plane float32 LE
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, IOFailure

CONTAINER_VERSION = 1
FLOW_MAGIC = b"CFTF"
ARTIFACT_MAGIC = b"CFTC"
CHECKPOINT_MAGIC = b"CFTK"

_DTYPES = {
    "float32": "<f4",
    "int64": "<i8",
    "uint8": "u1",
}


def write_container(path: str | Path, magic: bytes, arrays: dict[str, np.ndarray],
                    meta: dict, version: int = CONTAINER_VERSION) -> Path:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = {np.float32: "float32", np.int64: "int64", np.uint8: "uint8"}.get(arr.dtype.type)
        if dtype is None:
            raise ValueError(f"array {name!r} has unsupported dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        payload += arr.astype(_DTYPES[dtype]).tobytes()
    manifest = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<H", version))
            fh.write(struct.pack("<I", len(manifest)))
            fh.write(manifest)
            fh.write(bytes(payload))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_container(path: str | Path, magic: bytes) -> tuple[dict[str, np.ndarray], dict, int]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc

    if len(blob) < 10 or blob[:4] != magic:
        raise CorruptCheckpoint(f"{path}: bad magic (expected {magic!r})")
    version = struct.unpack("<H", blob[4:6])[0]
    (manifest_len,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + manifest_len:
        raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[10:10 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest") from exc

    arrays: dict[str, np.ndarray] = {}
    offset = 10 + manifest_len
    for entry in manifest.get("arrays", []):
        shape = tuple(entry["shape"])
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(blob):
            raise CorruptCheckpoint(f"{path}: truncated payload for {entry['name']!r}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptCheckpoint(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays, manifest.get("meta", {}), version


def write_flow(path: str | Path, flow: np.ndarray, version: int = CONTAINER_VERSION) -> Path:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 4 or flow.shape[0] != 2:
        raise ValueError(f"flow must be [2, T, H, W], got {flow.shape}")
    _, t, h, w = flow.shape
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(FLOW_MAGIC)
            fh.write(struct.pack("<H", version))
            fh.write(struct.pack("<III", t, h, w))
            fh.write(np.ascontiguousarray(flow[0], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(flow[1], dtype="<f4").tobytes())
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_flow(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < 18 or blob[:4] != FLOW_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a flow file")
    t, h, w = struct.unpack("<III", blob[6:18])
    plane = t * h * w * 4
    if len(blob) != 18 + 2 * plane:
        raise CorruptCheckpoint(f"{path}: flow payload size mismatch")
    u = np.frombuffer(blob[18:18 + plane], dtype="<f4").reshape(t, h, w)
    v = np.frombuffer(blob[18 + plane:], dtype="<f4").reshape(t, h, w)
    return np.stack([u, v]).astype(np.float32)
