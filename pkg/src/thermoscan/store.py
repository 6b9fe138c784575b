"""Binary embedding store (magic "IREMB", little-endian).

Header: magic, version u32, d u32, count u64. Records: image_id u64,
plant_id u16, module_id u32, binary label u8 (0 normal, 1 anomalous,
255 unlabelled), fault class u8 (0 none, 1..10 in canonical order),
then d float32 components.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .encoder import Embedding
from .errors import StoreFormatError
from .manifest import FAULT_CLASSES, FAULT_CODES, LABEL_ANOMALOUS, LABEL_NORMAL

MAGIC = b"IREMB"
VERSION = 1

LABEL_BYTE = {LABEL_NORMAL: 0, LABEL_ANOMALOUS: 1, None: 255}
BYTE_LABEL = {0: LABEL_NORMAL, 1: LABEL_ANOMALOUS, 255: None}


def _record_dtype(d: int) -> np.dtype:
    return np.dtype(
        [
            ("image_id", "<u8"),
            ("plant_id", "<u2"),
            ("module_id", "<u4"),
            ("label", "u1"),
            ("fault", "u1"),
            ("z", "<f4", (d,)),
        ]
    )


def write_store(path: Path | str, embeddings: list[Embedding]) -> None:
    if not embeddings:
        raise StoreFormatError("refusing to write an empty embedding store")
    d = int(embeddings[0].z.shape[-1])
    records = np.zeros(len(embeddings), dtype=_record_dtype(d))
    for i, e in enumerate(embeddings):
        if e.z.shape[-1] != d:
            raise StoreFormatError("mixed embedding dimensions in store")
        if not 0 <= e.image_id < 2**64:
            raise StoreFormatError(f"image_id {e.image_id} out of u64 range")
        if not 0 <= e.plant_id < 2**16:
            raise StoreFormatError(f"plant_id {e.plant_id} out of u16 range")
        if not 0 <= e.module_id < 2**32:
            raise StoreFormatError(f"module_id {e.module_id} out of u32 range")
        records[i] = (
            e.image_id,
            e.plant_id,
            e.module_id,
            LABEL_BYTE[e.binary_label],
            FAULT_CODES[e.fault_class] if e.fault_class else 0,
            np.asarray(e.z, dtype="<f4"),
        )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", d))
        fh.write(struct.pack("<Q", len(embeddings)))
        fh.write(records.tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_store(path: Path | str) -> list[Embedding]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StoreFormatError(f"cannot read store {path}: {exc}") from exc
    header = len(MAGIC) + 4 + 4 + 8
    if len(data) < header or data[: len(MAGIC)] != MAGIC:
        raise StoreFormatError(f"{path}: not an embedding store")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported store version {version}")
    (d,) = struct.unpack_from("<I", data, len(MAGIC) + 4)
    (count,) = struct.unpack_from("<Q", data, len(MAGIC) + 8)
    dtype = _record_dtype(d)
    expected = header + count * dtype.itemsize
    if len(data) != expected:
        raise StoreFormatError(
            f"{path}: expected {expected} bytes for {count} records, got {len(data)}"
        )
    records = np.frombuffer(data, dtype=dtype, count=count, offset=header)
    out = []
    for rec in records:
        label_byte = int(rec["label"])
        fault_byte = int(rec["fault"])
        if label_byte not in BYTE_LABEL:
            raise StoreFormatError(f"{path}: bad label byte {label_byte}")
        if fault_byte > len(FAULT_CLASSES):
            raise StoreFormatError(f"{path}: bad fault byte {fault_byte}")
        out.append(
            Embedding(
                z=np.array(rec["z"], dtype=np.float32),
                image_id=int(rec["image_id"]),
                plant_id=int(rec["plant_id"]),
                module_id=int(rec["module_id"]),
                binary_label=BYTE_LABEL[label_byte],
                fault_class=FAULT_CLASSES[fault_byte - 1] if fault_byte else None,
            )
        )
    return out
