"""SGD training loop with momentum, weight decay and cosine-annealed LR.

Supports the contrastive objective (embeddings on the hypersphere) and a
binary cross-entropy baseline with a 2-way linear head, a leaveout
protocol that removes selected fault classes from the source, and
shuffled or stratified batch sampling. Runs are bit-reproducible for a
fixed (config, dataset, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc
from .augment import apply_transform, sample_transform
from .checkpoint import save_checkpoint
from .errors import DegenerateBatch, ThermoscanError
from .evaluation import ScoredSample, auroc, average_precision
from .index import build_index_arrays, predict_scores
from .manifest import FAULT_CLASSES, IRImage
from .objective import BatchLabels, contrastive_loss, cross_entropy_loss, softmax_scores
from .layers import l2_normalize_rows, l2_normalize_rows_backward
from .preprocess import PlantStats, preprocess, stats_by_plant

OBJECTIVE_CONTRASTIVE = "contrastive"
OBJECTIVE_CROSS_ENTROPY = "cross_entropy"
SAMPLING_SHUFFLE = "shuffle"
SAMPLING_STRATIFIED = "stratified"

MAX_DEGENERATE_RETRIES = 10
VALIDATION_K = 100
VALIDATION_DELTA = 0.1


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 64
    lr: float = 6e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    tau: float = 0.1
    seed: int = 0
    objective: str = OBJECTIVE_CONTRASTIVE
    sampling: str = SAMPLING_SHUFFLE
    leaveout_classes: frozenset[str] = frozenset()
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.batch_size < 2:
            raise ThermoscanError("batch_size must be >= 2")
        if self.total_steps < 0:
            raise ThermoscanError("total_steps must be >= 0")
        if not (self.lr > 0 and self.tau > 0 and self.checkpoint_every > 0):
            raise ThermoscanError("lr, tau and checkpoint_every must be positive")
        if not (0 <= self.momentum < 1):
            raise ThermoscanError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ThermoscanError("weight_decay must be >= 0")
        if self.objective not in (OBJECTIVE_CONTRASTIVE, OBJECTIVE_CROSS_ENTROPY):
            raise ThermoscanError(f"unknown objective {self.objective!r}")
        if self.sampling not in (SAMPLING_SHUFFLE, SAMPLING_STRATIFIED):
            raise ThermoscanError(f"unknown sampling mode {self.sampling!r}")
        unknown = set(self.leaveout_classes) - set(FAULT_CLASSES)
        if unknown:
            raise ThermoscanError(f"unknown leaveout classes {sorted(unknown)}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Production-scale preset: 110000 steps at batch size 128."""
        base = dict(total_steps=110_000, batch_size=128)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        rec = {
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "tau": self.tau,
            "seed": self.seed,
            "objective": self.objective,
            "sampling": self.sampling,
            "leaveout_classes": sorted(self.leaveout_classes),
            "checkpoint_every": self.checkpoint_every,
        }
        return rec


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing: lr0/2 * (1 + cos(p*pi)) with p = step/total_steps."""
    if total_steps <= 0:
        raise ThermoscanError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ThermoscanError(f"step {step} outside [0, {total_steps}]")
    progress = step / total_steps
    return lr0 / 2.0 * (1.0 + math.cos(progress * math.pi))


def sgd_step(
    params: enc.EncoderParameters,
    grads: dict[str, np.ndarray],
    momentum_buffers: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """One classical momentum-SGD update, in place.

    g' = g + wd * w; buf = momentum * buf + g'; w -= lr * buf.
    Aborts (without touching parameters) on non-finite gradients.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ThermoscanError(f"non-finite gradient for {name!r}; step aborted")
        if g.shape != params.tensors[name].shape:
            raise ThermoscanError(f"gradient shape mismatch for {name!r}")
    for name, g in grads.items():
        w = params.tensors[name]
        buf = momentum_buffers[name]
        adjusted = g + weight_decay * w
        buf *= momentum
        buf += adjusted
        w -= (lr * buf).astype(w.dtype, copy=False)


def make_batches(
    is_anomalous: Sequence[bool],
    batch_size: int,
    sampling: str,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """One epoch of index batches over a labelled train set.

    shuffle: seeded permutation cut into full batches (short tail dropped).
    stratified: every batch carries at least max(1, round(batch_size *
    anomaly_fraction)) anomalies and at least one normal, recycling each
    class pool (reshuffled) when it runs out.
    """
    flags = np.asarray(is_anomalous, dtype=bool)
    n = flags.shape[0]
    if n == 0:
        raise ThermoscanError("empty train set")
    n_batches = n // batch_size
    if n_batches == 0:
        raise ThermoscanError(
            f"train set of {n} images is smaller than batch size {batch_size}"
        )
    if sampling == SAMPLING_SHUFFLE:
        perm = rng.permutation(n)
        return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]

    anomaly_idx = np.flatnonzero(flags)
    normal_idx = np.flatnonzero(~flags)
    if anomaly_idx.size == 0:
        raise DegenerateBatch("stratified sampling requires anomalies in the source")
    if normal_idx.size == 0:
        raise DegenerateBatch("stratified sampling requires normal samples in the source")
    fraction = anomaly_idx.size / n
    quota = int(np.floor(batch_size * fraction + 0.5))
    quota = min(max(quota, 1), batch_size - 1)

    def pool(indices: np.ndarray):
        order = rng.permutation(indices)
        pos = 0
        while True:
            if pos == order.shape[0]:
                order = rng.permutation(indices)
                pos = 0
            yield order[pos]
            pos += 1

    anomaly_pool = pool(anomaly_idx)
    normal_pool = pool(normal_idx)
    batches = []
    for _ in range(n_batches):
        members = [next(anomaly_pool) for _ in range(quota)]
        members += [next(normal_pool) for _ in range(batch_size - quota)]
        batches.append(rng.permutation(np.array(members)))
    return batches


@dataclass
class CheckpointRef:
    step: int
    path: Path


@dataclass
class TrainResult:
    checkpoints: list[CheckpointRef]
    log: list[dict]
    stats: dict[int, PlantStats]
    params: enc.EncoderParameters
    out_dir: Path

    @property
    def final_checkpoint(self) -> CheckpointRef:
        return self.checkpoints[-1]


def apply_leaveout(images: Sequence[IRImage], leaveout: frozenset[str]) -> list[IRImage]:
    """Drop every source image whose fault class is in the leaveout set."""
    if not leaveout:
        return list(images)
    return [im for im in images if im.fault_class not in leaveout]


def _preprocess_bank(
    images: Sequence[IRImage], stats: dict[int, PlantStats]
) -> tuple[np.ndarray, np.ndarray]:
    patches = [preprocess(im, stats[im.plant_id]) for im in images]
    bank = np.stack([p.tensor for p in patches]).astype(np.float32)
    flags = np.array([p.is_anomalous for p in patches], dtype=bool)
    return bank, flags


def _write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def train(
    config: TrainConfig,
    source_images: Sequence[IRImage],
    out_dir: Path | str,
    validation_images: Sequence[IRImage] | None = None,
    encoder_config: enc.EncoderConfig | None = None,
) -> TrainResult:
    """Train on labelled source images; returns checkpoints plus the log.

    ``source_images`` should be the train split of the source plant(s);
    per-plant normalization statistics are computed from exactly these
    images (after leaveout filtering) and saved alongside the checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    images = apply_leaveout(source_images, config.leaveout_classes)
    if not images:
        raise ThermoscanError("no source images left after leaveout filtering")
    contrastive = config.objective == OBJECTIVE_CONTRASTIVE

    if encoder_config is None:
        encoder_config = enc.desk_config() if contrastive else enc.classifier_config()
    if not contrastive and encoder_config.embed_dim != 2:
        raise ThermoscanError("cross-entropy training needs a 2-output head")

    flags_all = np.array([im.is_anomalous for im in images], dtype=bool)
    if contrastive and (flags_all.all() or not flags_all.any()):
        raise DegenerateBatch(
            "contrastive training needs both classes in the source after leaveout"
        )

    stats = stats_by_plant(images)
    if validation_images:
        val_stats = stats_by_plant(validation_images)
    _write_json(
        out_dir / "stats.json",
        {str(pid): {"mean": st.mean, "std": st.std} for pid, st in stats.items()},
    )
    _write_json(
        out_dir / "config.json",
        {"train": config.to_dict(), "encoder": encoder_config.to_dict()},
    )

    bank, flags = _preprocess_bank(images, stats)
    if validation_images:
        val_bank, _ = _preprocess_bank(validation_images, val_stats)
        val_labels = [im.binary_label for im in validation_images]

    root = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, augment_ss = root.spawn(3)
    params = enc.init_parameters(encoder_config, seed=init_ss)
    momentum_buffers = {
        name: np.zeros_like(tensor) for name, tensor in params.tensors.items()
    }
    batch_rng = np.random.Generator(np.random.PCG64(batch_ss))
    augment_rng = np.random.Generator(np.random.PCG64(augment_ss))

    checkpoints: list[CheckpointRef] = []
    log: list[dict] = []
    log_path = out_dir / "log.jsonl"
    log_fh = open(log_path, "w", encoding="utf-8")

    def emit_checkpoint(completed: int) -> CheckpointRef:
        path = out_dir / f"ckpt_{completed:06d}.tsck"
        save_checkpoint(path, params, momentum_buffers, completed, config.seed)
        ref = CheckpointRef(step=completed, path=path)
        checkpoints.append(ref)
        return ref

    def validation_metrics() -> dict:
        source_z = enc.embed_tensor(params, bank, batch_size=config.batch_size)
        val_z = enc.embed_tensor(params, val_bank, batch_size=config.batch_size)
        index = build_index_arrays(source_z, flags)
        k = min(VALIDATION_K, source_z.shape[0])
        scores = predict_scores(index, val_z, k)
        samples = [
            ScoredSample(score=float(s), label=lbl)
            for s, lbl in zip(scores, val_labels)
        ]
        return {
            "val_auroc": auroc(samples),
            "val_ap": average_precision(samples),
        }

    def write_record(rec: dict) -> None:
        log.append(rec)
        log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        log_fh.flush()

    try:
        write_record(
            {
                "event": "dataset",
                "n_images": len(images),
                "image_ids": [im.image_id for im in images],
                "leaveout": sorted(config.leaveout_classes),
            }
        )
        if config.total_steps == 0:
            emit_checkpoint(0)
            return TrainResult(checkpoints, log, stats, params, out_dir)

        epoch: list[np.ndarray] = []
        consecutive_degenerate = 0
        for step in range(config.total_steps):
            lr = cosine_lr(step, config.total_steps, config.lr)
            while True:
                if not epoch:
                    epoch = make_batches(
                        flags, config.batch_size, config.sampling, batch_rng
                    )
                idx = epoch.pop(0)
                batch_flags = flags[idx]
                if contrastive and (batch_flags.all() or not batch_flags.any()):
                    consecutive_degenerate += 1
                    if consecutive_degenerate > MAX_DEGENERATE_RETRIES:
                        raise DegenerateBatch(
                            f"{MAX_DEGENERATE_RETRIES} consecutive single-class batches "
                            "under shuffle sampling; use sampling='stratified'"
                        )
                    continue
                consecutive_degenerate = 0
                break

            xb = apply_transform(sample_transform(augment_rng), bank[idx])
            _features, pre_norm, cache = enc.forward(params, xb)
            if contrastive:
                z, norms = l2_normalize_rows(pre_norm)
                labels = BatchLabels.from_flags(batch_flags.tolist())
                loss, dz = contrastive_loss(z, labels, config.tau)
                d_pre_norm = l2_normalize_rows_backward(dz, z, norms)
            else:
                loss, d_pre_norm = cross_entropy_loss(
                    pre_norm, batch_flags.astype(int)
                )
            grads = enc.backward(params, cache, d_pre_norm.astype(np.float32))
            sgd_step(params, grads, momentum_buffers, lr, config.momentum,
                     config.weight_decay)

            completed = step + 1
            record = {"step": step, "lr": lr, "loss": loss}
            if completed % config.checkpoint_every == 0 or completed == config.total_steps:
                emit_checkpoint(completed)
                record["checkpoint"] = completed
                if validation_images:
                    record.update(validation_metrics())
            write_record(record)
    finally:
        log_fh.close()

    return TrainResult(checkpoints, log, stats, params, out_dir)


def classifier_scores(
    params: enc.EncoderParameters, bank: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Anomaly probabilities from a cross-entropy-trained model."""
    n = bank.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_size):
        chunk = bank[start:start + batch_size]
        short = chunk.shape[0]
        if short < batch_size:
            pad = np.zeros((batch_size - short, *bank.shape[1:]), dtype=bank.dtype)
            chunk = np.concatenate([chunk, pad], axis=0)
        _f, logits, _c = enc.forward(params, chunk)
        out[start:start + short] = softmax_scores(logits[:short])
    return out
