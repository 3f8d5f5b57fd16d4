"""Portable tensor files (FBT1) and checkpoint bundles.

FBT1 layout: magic ``FBT1``, little-endian u32 rank, u32 extents, u8 dtype
code (0=f32, 1=f64, 2=i32), then the raw little-endian buffer.  Round trips
are bit-exact.

A checkpoint is a plain-text header (config lines plus a name/shape/offset
manifest), a ``---`` separator line, then the named FBT1 records back to back.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FBT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
_CODE_FOR_KIND = {"f4": 0, "f8": 1, "i4": 2}

_CKPT_MAGIC = "FBNET-CHECKPOINT-V1"
_CKPT_SEP = b"\n---\n"


def _dtype_code(arr: np.ndarray) -> int:
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _CODE_FOR_KIND:
        raise DataError(f"FBT1 cannot store dtype {arr.dtype}")
    return _CODE_FOR_KIND[key]


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    code = _dtype_code(arr)
    arr = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False)
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + struct.pack("<B", code) + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != MAGIC:
        raise DataError("not an FBT1 tensor (bad magic)")
    pos = offset + 4
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if code not in _DTYPE_CODES:
        raise DataError(f"FBT1: unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    nbytes = count * dt.itemsize
    if len(buf) < pos + nbytes:
        raise DataError("FBT1: truncated buffer")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.copy(), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict[str, str]) -> None:
    blobs: list[bytes] = []
    manifest: list[str] = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise DataError(f"checkpoint tensor name contains whitespace: {name!r}")
        blob = tensor_to_bytes(arr)
        shape = ",".join(str(e) for e in arr.shape) or "scalar"
        manifest.append(f"tensor {name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines = [_CKPT_MAGIC]
    for key, val in config.items():
        sval = str(val)
        if any(ch.isspace() for ch in f"{key}{sval}"):
            raise DataError(f"checkpoint config entries may not contain whitespace: {key}={sval!r}")
        lines.append(f"cfg {key} {sval}")
    lines.extend(manifest)
    header = "\n".join(lines).encode()
    Path(path).write_bytes(header + _CKPT_SEP + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    sep = raw.find(_CKPT_SEP)
    if sep < 0:
        raise DataError(f"{path}: missing checkpoint header separator")
    header = raw[:sep].decode()
    data = raw[sep + len(_CKPT_SEP):]
    lines = header.splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    config: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "cfg" and len(parts) == 3:
            config[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 5:
            name, _shape, off, nbytes = parts[1], parts[2], int(parts[3]), int(parts[4])
            arr, end = tensor_from_bytes(data, off)
            if end - off != nbytes:
                raise DataError(f"{path}: manifest length mismatch for {name}")
            tensors[name] = arr
        else:
            raise DataError(f"{path}: malformed checkpoint header line: {line!r}")
    return tensors, config
