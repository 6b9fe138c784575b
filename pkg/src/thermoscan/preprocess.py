"""Radiometric preprocessing: Celsius conversion, min-max normalization,
bilinear resize, per-plant standardization and channel stacking.

The pipeline for one image is

    rotate (junction box to top) -> Celsius -> min-max to [0, 255]
    -> bilinear resize to 64x64 -> (x - plant mean) / plant std
    -> stack 3 identical channels

Per-plant statistics are computed over the pre-standardization pixels of
the plant's train split only, so the standardized train split has mean 0
and unit variance by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import MissingPlantStats, ThermoscanError
from .manifest import IRImage

PATCH_SIZE = 64
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PlantStats:
    """Mean/std of a plant's normalized train-split pixels (8-bit units)."""

    plant_id: int
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ThermoscanError(f"plant {self.plant_id}: std must be > 0")


@dataclass
class PreprocessedPatch:
    """Standardized 3x64x64 input tensor with identity and labels carried through."""

    tensor: np.ndarray
    image_id: int
    plant_id: int
    module_id: int
    binary_label: str | None = None
    fault_class: str | None = None

    @property
    def is_anomalous(self) -> bool:
        return self.binary_label == "anomalous"


def round_half_up(x: np.ndarray | float) -> np.ndarray | float:
    """Round with .5 always going up (numpy rounds half to even)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def raw_to_celsius(raw: np.ndarray, gain: float, offset: float) -> np.ndarray:
    """Affine conversion of 16-bit radiometric counts to degrees Celsius."""
    if not gain > 0:
        raise ThermoscanError(f"gain must be > 0, got {gain}")
    return gain * np.asarray(raw, dtype=np.float64) + offset


def normalize_minmax(celsius: np.ndarray) -> np.ndarray:
    """Map a temperature grid onto [0, 255] using its own min/max.

    A constant grid maps to all zeros (coldest = 0 convention).
    """
    grid = np.asarray(celsius, dtype=np.float64)
    if grid.size == 0:
        raise ThermoscanError("cannot normalize an empty grid")
    lo = grid.min()
    hi = grid.max()
    if hi == lo:
        return np.zeros(grid.shape, dtype=np.uint8)
    out = round_half_up(255.0 * (grid - lo) / (hi - lo))
    return out.astype(np.uint8)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample of a 2-D grid.

    Output corners sample input corners exactly; an identity-size call
    returns the input values unchanged.
    """
    grid = np.asarray(grid, dtype=np.float64)
    in_h, in_w = grid.shape
    if (in_h, in_w) == (out_h, out_w):
        return grid.copy()

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys = coords(in_h, out_h)
    xs = coords(in_w, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _normalized_view(image: IRImage, gain: float | None, offset: float | None) -> np.ndarray:
    """Rotated, Celsius-converted, min-max-normalized, resized 64x64 grid."""
    g = image.gain if gain is None else gain
    o = image.offset if offset is None else offset
    upright = np.rot90(image.raw, k=image.orientation)
    celsius = raw_to_celsius(upright, g, o)
    eight_bit = normalize_minmax(celsius)
    return bilinear_resize(eight_bit.astype(np.float64), PATCH_SIZE, PATCH_SIZE)


def preprocess(
    image: IRImage,
    stats: PlantStats,
    gain: float | None = None,
    offset: float | None = None,
) -> PreprocessedPatch:
    """Run the full deterministic preprocessing pipeline for one image."""
    if stats.plant_id != image.plant_id:
        raise MissingPlantStats(
            f"stats are for plant {stats.plant_id}, image belongs to plant {image.plant_id}"
        )
    resized = _normalized_view(image, gain, offset)
    standardized = (resized - stats.mean) / stats.std
    tensor = np.repeat(standardized[None, :, :], 3, axis=0).astype(np.float32)
    return PreprocessedPatch(
        tensor=tensor,
        image_id=image.image_id,
        plant_id=image.plant_id,
        module_id=image.module_id,
        binary_label=image.binary_label,
        fault_class=image.fault_class,
    )


def compute_plant_stats(
    images: Iterable[IRImage],
    plant_id: int,
    gain: float | None = None,
    offset: float | None = None,
) -> PlantStats:
    """Population mean/std over the pre-standardization pixels of a plant.

    Pass the train-split images only; feeding the test split here leaks
    evaluation data into the normalization. The std is floored at 1e-6.
    """
    total = 0.0
    total_sq = 0.0
    count = 0
    for image in images:
        if image.plant_id != plant_id:
            continue
        view = _normalized_view(image, gain, offset)
        total += float(view.sum())
        total_sq += float(np.square(view).sum())
        count += view.size
    if count == 0:
        raise MissingPlantStats(f"no images for plant {plant_id}")
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = max(float(np.sqrt(var)), STD_FLOOR)
    return PlantStats(plant_id=plant_id, mean=mean, std=std)


def stats_by_plant(images: Iterable[IRImage]) -> dict[int, PlantStats]:
    """Per-plant statistics for every plant present in ``images``."""
    images = list(images)
    plants = sorted({im.plant_id for im in images})
    return {pid: compute_plant_stats(images, pid) for pid in plants}
