"""Binary checkpoint serialization (magic "TSCK", little-endian).

Layout: magic, format version u32, length-prefixed config text (JSON),
then two record blocks (parameters, optimizer momentum buffers), each a
u32 record count followed by per-tensor records of
(name_len u16, name, rank u8, dims u32 each, float32 payload),
then the u64 step counter and u64 training seed.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderParameters
from .errors import StoreFormatError

MAGIC = b"TSCK"
VERSION = 1


def _write_tensor(fh, name: str, tensor: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise StoreFormatError("truncated checkpoint file")
    return data


def save_checkpoint(
    path: Path | str,
    params: EncoderParameters,
    momentum: dict[str, np.ndarray],
    step: int,
    seed: int,
) -> None:
    """Write a checkpoint atomically (temp file + rename)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config_text = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_text)))
    buf.write(config_text)

    buf.write(struct.pack("<I", len(params.tensors)))
    for name in params.names():
        _write_tensor(buf, name, params.tensors[name])
    buf.write(struct.pack("<I", len(momentum)))
    for name in sorted(momentum):
        _write_tensor(buf, name, momentum[name])

    buf.write(struct.pack("<Q", step))
    buf.write(struct.pack("<Q", seed))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(
    path: Path | str,
) -> tuple[EncoderParameters, dict[str, np.ndarray], int, int]:
    """Read a checkpoint; returns (params, momentum buffers, step, seed)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise StoreFormatError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if _read_exact(fh, 4) != MAGIC:
            raise StoreFormatError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise StoreFormatError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = EncoderConfig.from_dict(json.loads(_read_exact(fh, config_len)))

        (n_params,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(n_params))
        (n_buffers,) = struct.unpack("<I", _read_exact(fh, 4))
        momentum = dict(_read_tensor(fh) for _ in range(n_buffers))

        (step,) = struct.unpack("<Q", _read_exact(fh, 8))
        (seed,) = struct.unpack("<Q", _read_exact(fh, 8))
    return EncoderParameters(config=config, tensors=tensors), momentum, step, seed
