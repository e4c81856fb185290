"""Binary checkpoint format: named tensors, CRC-terminated, bit-exact.

Layout: magic "SPIN", u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 dtype code (0=f32, 1=f64), u8 rank,
u32 dims, raw little-endian data; a trailing u32 CRC32 covers all
preceding bytes. Everything is little-endian.

Step count and the config echo ride along as specially named tensors
("meta/step", "meta/config_json" storing UTF-8 bytes as floats) so the
whole checkpoint stays one CRC-protected file.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

MAGIC = b"SPIN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name!r}")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(buf)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    body, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch; file is corrupted")
    if body[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", body, 8)
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack_from(f"<{rank}I", body, pos) if rank else ()
        pos += 4 * rank
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        if rank == 0:
            n_bytes = dtype.itemsize
        if pos + n_bytes > len(body):
            raise CheckpointError(f"{path}: tensor {name!r} data runs past end of file")
        arr = np.frombuffer(body, dtype=dtype, count=n_bytes // dtype.itemsize, offset=pos).reshape(dims)
        pos += n_bytes
        tensors[name] = arr.copy()
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes after last tensor")
    return tensors


def save_model_checkpoint(path: str, model, optimizer=None, step: int = 0, flat_config: dict | None = None) -> None:
    tensors: dict[str, np.ndarray] = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    tensors["meta/step"] = np.array(float(step), dtype=np.float64)
    if flat_config is not None:
        cfg_bytes = np.frombuffer(json.dumps(flat_config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        tensors["meta/config_json"] = cfg_bytes.astype(np.float32)
    save_tensors(path, tensors)


def load_model_checkpoint(path: str, model, optimizer=None) -> tuple[int, dict | None]:
    """Restore parameters (strict names/shapes); returns (step, flat config echo)."""
    tensors = load_tensors(path)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: checkpoint is missing parameter {name!r}")
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr.astype(p.dtype, copy=True)
    step = int(tensors["meta/step"]) if "meta/step" in tensors else 0
    if optimizer is not None:
        optimizer.load_state_arrays(tensors, step)
    config = None
    if "meta/config_json" in tensors:
        config = json.loads(tensors["meta/config_json"].astype(np.uint8).tobytes().decode("utf-8"))
    return step, config


def read_config_echo(path: str) -> dict | None:
    tensors = load_tensors(path)
    if "meta/config_json" not in tensors:
        return None
    return json.loads(tensors["meta/config_json"].astype(np.uint8).tobytes().decode("utf-8"))
