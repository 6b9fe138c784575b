"""Module-disjoint train/test splitting.

Images of one PV module are near-duplicates, so the split is decided per
module: modules are shuffled by seed and assigned greedily to the train
side until the train image fraction first reaches the requested ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ThermoscanError
from .manifest import IRImage


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"train": list(self.train), "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, rec: dict) -> "DatasetSplit":
        return cls(train=tuple(rec["train"]), test=tuple(rec["test"]), seed=int(rec["seed"]))


def split_dataset(images: Sequence[IRImage], ratio: float = 0.7, seed: int = 0) -> DatasetSplit:
    """Split image ids into module-disjoint train/test sets."""
    if not 0.0 < ratio < 1.0:
        raise ThermoscanError(f"split ratio must lie in (0, 1), got {ratio}")
    by_module: dict[int, list[int]] = {}
    for im in images:
        by_module.setdefault(im.module_id, []).append(im.image_id)
    if len(by_module) < 2:
        raise ThermoscanError("need at least 2 modules to split")

    module_ids = sorted(by_module)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(module_ids))

    total = len(images)
    train: list[int] = []
    test: list[int] = []
    assigned = 0
    filling_train = True
    for pos in order:
        mid = module_ids[pos]
        if filling_train:
            train.extend(by_module[mid])
            assigned += len(by_module[mid])
            if assigned / total >= ratio:
                filling_train = False
        else:
            test.extend(by_module[mid])
    return DatasetSplit(train=tuple(train), test=tuple(test), seed=seed)


def select_images(images: Iterable[IRImage], ids: Iterable[int]) -> list[IRImage]:
    wanted = set(ids)
    return [im for im in images if im.image_id in wanted]
