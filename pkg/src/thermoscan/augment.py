"""Label-preserving flip/rotation augmentation applied per batch.

One transform is drawn per batch and applied to every patch in it. The
transform set is the 16 parameter tuples (flip_ud, flip_lr, quarter_turns)
whose actions form the dihedral symmetry group of the square.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ThermoscanError
from .preprocess import PreprocessedPatch


@dataclass(frozen=True)
class BatchTransform:
    flip_ud: int
    flip_lr: int
    quarter_turns: int

    def __post_init__(self):
        if self.flip_ud not in (0, 1) or self.flip_lr not in (0, 1):
            raise ThermoscanError("flips must be 0 or 1")
        if self.quarter_turns not in (0, 1, 2, 3):
            raise ThermoscanError("quarter_turns must be in 0..3")


IDENTITY = BatchTransform(0, 0, 0)

ALL_TRANSFORMS = tuple(
    BatchTransform(ud, lr, k) for ud in (0, 1) for lr in (0, 1) for k in range(4)
)


def sample_transform(rng: np.random.Generator) -> BatchTransform:
    return BatchTransform(
        flip_ud=int(rng.integers(0, 2)),
        flip_lr=int(rng.integers(0, 2)),
        quarter_turns=int(rng.integers(0, 4)),
    )


def apply_transform(t: BatchTransform, tensor: np.ndarray) -> np.ndarray:
    """Apply flip_ud, then flip_lr, then rotation to the last two axes."""
    out = tensor
    if t.flip_ud:
        out = np.flip(out, axis=-2)
    if t.flip_lr:
        out = np.flip(out, axis=-1)
    if t.quarter_turns:
        out = np.rot90(out, k=t.quarter_turns, axes=(-2, -1))
    return np.ascontiguousarray(out)


_PROBE = np.arange(9.0).reshape(3, 3)


def inverse_transform(t: BatchTransform) -> BatchTransform:
    """The member of the transform set that undoes ``t``."""
    probe = apply_transform(t, _PROBE)
    for cand in ALL_TRANSFORMS:
        if np.array_equal(apply_transform(cand, probe), _PROBE):
            return cand
    raise AssertionError("transform set is closed under inversion")


def augment_batch(
    batch: list[PreprocessedPatch], rng: np.random.Generator
) -> tuple[list[PreprocessedPatch], BatchTransform]:
    """Augment every patch in the batch with one shared random transform."""
    if not batch:
        raise ThermoscanError("cannot augment an empty batch")
    t = sample_transform(rng)
    out = [
        PreprocessedPatch(
            tensor=apply_transform(t, p.tensor),
            image_id=p.image_id,
            plant_id=p.plant_id,
            module_id=p.module_id,
            binary_label=p.binary_label,
            fault_class=p.fault_class,
        )
        for p in batch
    ]
    return out, t


def augment_tensor_batch(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Same per-batch augmentation for a stacked (N, C, H, W) tensor."""
    return apply_transform(sample_transform(rng), x)
