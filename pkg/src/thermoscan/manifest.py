"""Dataset records, manifest files and 16-bit PNG image I/O.

A dataset directory holds one ``manifest.jsonl`` (one JSON record per image)
plus the referenced 16-bit single-channel PNG files. Identifiers are
integers so they survive the binary embedding-store round trip
(image_id u64, plant_id u16, module_id u32).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError

# Canonical fault-class order; position+1 is the wire code in stores.
FAULT_CLASSES = ("Mh", "Mp", "Sh", "Sp", "Pid", "Cm+", "Cs+", "C", "D", "Chs")
FAULT_CODES = {name: i + 1 for i, name in enumerate(FAULT_CLASSES)}

LABEL_NORMAL = "normal"
LABEL_ANOMALOUS = "anomalous"

DEFAULT_GAIN = 0.04
DEFAULT_OFFSET = -273.15

MIN_IMAGE_SIDE = 8


@dataclass
class IRImage:
    """One radiometric IR frame of a single PV module plus its identity.

    ``raw`` holds 16-bit unsigned counts; ``orientation`` counts the
    quarter-turns that place the junction box at the top edge.
    ``binary_label`` is None for unlabelled (target-plant) images.
    """

    image_id: int
    plant_id: int
    module_id: int
    raw: np.ndarray
    orientation: int = 0
    binary_label: str | None = None
    fault_class: str | None = None
    gain: float = DEFAULT_GAIN
    offset: float = DEFAULT_OFFSET

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.ndim != 2 or raw.shape[0] < MIN_IMAGE_SIDE or raw.shape[1] < MIN_IMAGE_SIDE:
            raise ManifestError(
                f"image {self.image_id}: raw grid must be 2-D with sides >= "
                f"{MIN_IMAGE_SIDE}, got shape {raw.shape}"
            )
        if self.fault_class is not None:
            if self.fault_class not in FAULT_CODES:
                raise ManifestError(
                    f"image {self.image_id}: unknown fault class {self.fault_class!r}"
                )
            if self.binary_label is None:
                self.binary_label = LABEL_ANOMALOUS
            elif self.binary_label != LABEL_ANOMALOUS:
                raise ManifestError(
                    f"image {self.image_id}: fault class requires an anomalous label"
                )
        elif self.binary_label == LABEL_ANOMALOUS:
            raise ManifestError(
                f"image {self.image_id}: anomalous label requires a fault class"
            )
        if self.binary_label not in (None, LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ManifestError(
                f"image {self.image_id}: bad binary label {self.binary_label!r}"
            )
        self.raw = raw.astype(np.uint16, copy=False)
        self.orientation = int(self.orientation) % 4

    @property
    def is_anomalous(self) -> bool:
        return self.binary_label == LABEL_ANOMALOUS


@dataclass
class ManifestEntry:
    image_id: int
    plant_id: int
    module_id: int
    path: str
    orientation: int = 0
    binary_label: str | None = None
    fault_class: str | None = None
    gain: float = DEFAULT_GAIN
    offset: float = DEFAULT_OFFSET

    def to_json(self) -> str:
        rec = {
            "image_id": self.image_id,
            "plant_id": self.plant_id,
            "module_id": self.module_id,
            "path": self.path,
            "orientation": self.orientation,
            "gain": self.gain,
            "offset": self.offset,
        }
        if self.binary_label is not None:
            rec["binary_label"] = self.binary_label
        if self.fault_class is not None:
            rec["fault_class"] = self.fault_class
        return json.dumps(rec, sort_keys=True)


def write_png16(path: Path | str, raw: np.ndarray) -> None:
    raw = np.ascontiguousarray(np.asarray(raw, dtype=np.uint16))
    Image.fromarray(raw).save(str(path), format="PNG")


def read_png16(path: Path | str) -> np.ndarray:
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.uint16)


def write_manifest(path: Path | str, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(entry.to_json() + "\n")


def read_manifest(path: Path | str) -> list[ManifestEntry]:
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(
                        ManifestEntry(
                            image_id=int(rec["image_id"]),
                            plant_id=int(rec["plant_id"]),
                            module_id=int(rec["module_id"]),
                            path=str(rec["path"]),
                            orientation=int(rec.get("orientation", 0)),
                            binary_label=rec.get("binary_label"),
                            fault_class=rec.get("fault_class"),
                            gain=float(rec.get("gain", DEFAULT_GAIN)),
                            offset=float(rec.get("offset", DEFAULT_OFFSET)),
                        )
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return entries


def load_images(dataset_dir: Path | str) -> list[IRImage]:
    """Read manifest.jsonl in ``dataset_dir`` and load every referenced image."""
    dataset_dir = Path(dataset_dir)
    entries = read_manifest(dataset_dir / "manifest.jsonl")
    images = []
    for e in entries:
        raw = read_png16(dataset_dir / e.path)
        images.append(
            IRImage(
                image_id=e.image_id,
                plant_id=e.plant_id,
                module_id=e.module_id,
                raw=raw,
                orientation=e.orientation,
                binary_label=e.binary_label,
                fault_class=e.fault_class,
                gain=e.gain,
                offset=e.offset,
            )
        )
    return images
