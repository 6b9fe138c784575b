"""Convolutional encoder with projection head and exact gradients.

The encoder is a plain stack of strided conv/ReLU stages followed by 2-D
global average pooling; the projection head is one hidden fully-connected
layer (ReLU) plus a linear output, or a single linear layer when
``head_hidden`` is None (the binary-classifier variant). Embeddings are
the L2-normalized head outputs.

Training runs in float32; verification against finite differences should
run the same code in float64 (every op is dtype-generic).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import layers
from .errors import DegenerateEmbedding, ThermoscanError
from .manifest import IRImage
from .preprocess import PlantStats, PreprocessedPatch, preprocess

# Production-scale reference recorded for documentation only: ResNet-34
# backbone, 512-d pooled features, head 512 -> 512 -> 128. Not buildable
# with this encoder; desk_config() is the runnable counterpart.
FULL_SCALE_REFERENCE = {
    "backbone": "resnet34",
    "feature_dim": 512,
    "head_hidden": 512,
    "embed_dim": 128,
}


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the conv encoder and projection head."""

    conv_stages: tuple[tuple[int, int, int], ...]  # (out_channels, kernel, stride)
    feature_dim: int
    head_hidden: int | None
    embed_dim: int
    init_seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ThermoscanError("embed_dim must be >= 2")
        if not self.conv_stages:
            raise ThermoscanError("need at least one conv stage")
        for ch, k, s in self.conv_stages:
            if ch < 1 or k < 1 or s < 1:
                raise ThermoscanError("conv stage widths/kernels/strides must be >= 1")
        if self.feature_dim != self.conv_stages[-1][0]:
            raise ThermoscanError("feature_dim must equal the last stage's channels")
        if self.head_hidden is not None and self.head_hidden < 1:
            raise ThermoscanError("head_hidden must be >= 1 or None")

    def to_dict(self) -> dict:
        return {
            "conv_stages": [list(s) for s in self.conv_stages],
            "feature_dim": self.feature_dim,
            "head_hidden": self.head_hidden,
            "embed_dim": self.embed_dim,
            "init_seed": self.init_seed,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, rec: Mapping) -> "EncoderConfig":
        return cls(
            conv_stages=tuple(tuple(s) for s in rec["conv_stages"]),
            feature_dim=int(rec["feature_dim"]),
            head_hidden=None if rec["head_hidden"] is None else int(rec["head_hidden"]),
            embed_dim=int(rec["embed_dim"]),
            init_seed=int(rec.get("init_seed", 0)),
            in_channels=int(rec.get("in_channels", 3)),
        )


def desk_config(init_seed: int = 0) -> EncoderConfig:
    """Reference desk-scale architecture: 3 conv stages, 64-d features, d=32."""
    return EncoderConfig(
        conv_stages=((16, 3, 2), (32, 3, 2), (64, 3, 2)),
        feature_dim=64,
        head_hidden=64,
        embed_dim=32,
        init_seed=init_seed,
    )


def classifier_config(init_seed: int = 0) -> EncoderConfig:
    """Same backbone with a single 2-way linear layer instead of the head."""
    return EncoderConfig(
        conv_stages=((16, 3, 2), (32, 3, 2), (64, 3, 2)),
        feature_dim=64,
        head_hidden=None,
        embed_dim=2,
        init_seed=init_seed,
    )


@dataclass
class EncoderParameters:
    """Named parameter tensors for every layer of encoder and head."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def astype(self, dtype) -> "EncoderParameters":
        return EncoderParameters(
            config=self.config,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
        )

    def copy(self) -> "EncoderParameters":
        return EncoderParameters(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )


@dataclass
class Embedding:
    """Unit-norm embedding vector with the image's identity and labels."""

    z: np.ndarray
    image_id: int
    plant_id: int
    module_id: int
    binary_label: str | None = None
    fault_class: str | None = None

    @property
    def is_anomalous(self) -> bool:
        return self.binary_label == "anomalous"


def init_parameters(
    config: EncoderConfig, seed: int | np.random.SeedSequence | None = None
) -> EncoderParameters:
    """Fan-in-scaled normal initialization, deterministic for a given seed."""
    if seed is None:
        seed = config.init_seed
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, np.ndarray] = {}

    def he(shape: tuple, fan_in: int) -> np.ndarray:
        scale = np.sqrt(2.0 / fan_in)
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    c_in = config.in_channels
    for i, (c_out, k, _s) in enumerate(config.conv_stages):
        tensors[f"conv{i}.weight"] = he((c_out, c_in, k, k), c_in * k * k)
        tensors[f"conv{i}.bias"] = np.zeros(c_out, dtype=np.float32)
        c_in = c_out
    if config.head_hidden is not None:
        tensors["head0.weight"] = he((config.feature_dim, config.head_hidden), config.feature_dim)
        tensors["head0.bias"] = np.zeros(config.head_hidden, dtype=np.float32)
        tensors["head1.weight"] = he((config.head_hidden, config.embed_dim), config.head_hidden)
        tensors["head1.bias"] = np.zeros(config.embed_dim, dtype=np.float32)
    else:
        tensors["head0.weight"] = he((config.feature_dim, config.embed_dim), config.feature_dim)
        tensors["head0.bias"] = np.zeros(config.embed_dim, dtype=np.float32)
    return EncoderParameters(config=config, tensors=tensors)


@dataclass
class ForwardCache:
    conv_caches: list
    relu_masks: list
    pool_shape: tuple
    head_inputs: list
    head_relu_mask: np.ndarray | None


def forward(
    params: EncoderParameters, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run the network on a batch: returns (features, pre_norm, cache).

    ``features`` are the pooled encoder outputs (N, F); ``pre_norm`` are
    the head outputs (N, d) before L2 normalization.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ThermoscanError(f"expected a non-empty (N, C, H, W) batch, got {x.shape}")
    if not np.isfinite(x).all():
        raise ThermoscanError("non-finite values in input batch")
    cfg = params.config
    t = params.tensors

    conv_caches = []
    relu_masks = []
    out = x
    for i, (_c, _k, stride) in enumerate(cfg.conv_stages):
        out, cache = layers.conv2d_forward(out, t[f"conv{i}.weight"], t[f"conv{i}.bias"], stride)
        conv_caches.append(cache)
        out, mask = layers.relu_forward(out)
        relu_masks.append(mask)

    features, pool_shape = layers.global_avg_pool_forward(out)

    head_inputs = []
    h, x0 = layers.dense_forward(features, t["head0.weight"], t["head0.bias"])
    head_inputs.append(x0)
    head_relu_mask = None
    if cfg.head_hidden is not None:
        h, head_relu_mask = layers.relu_forward(h)
        h, x1 = layers.dense_forward(h, t["head1.weight"], t["head1.bias"])
        head_inputs.append(x1)
    pre_norm = h

    cache = ForwardCache(
        conv_caches=conv_caches,
        relu_masks=relu_masks,
        pool_shape=pool_shape,
        head_inputs=head_inputs,
        head_relu_mask=head_relu_mask,
    )
    return features, pre_norm, cache


def backward(
    params: EncoderParameters, cache: ForwardCache, d_pre_norm: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact gradients of every parameter given dL/d(pre_norm)."""
    cfg = params.config
    t = params.tensors
    grads: dict[str, np.ndarray] = {}

    if cfg.head_hidden is not None:
        d, dw, db = layers.dense_backward(d_pre_norm, t["head1.weight"], cache.head_inputs[1])
        grads["head1.weight"] = dw
        grads["head1.bias"] = db
        d = layers.relu_backward(d, cache.head_relu_mask)
    else:
        d = d_pre_norm
    d, dw, db = layers.dense_backward(d, t["head0.weight"], cache.head_inputs[0])
    grads["head0.weight"] = dw
    grads["head0.bias"] = db

    d = layers.global_avg_pool_backward(d, cache.pool_shape)
    for i in reversed(range(len(cfg.conv_stages))):
        d = layers.relu_backward(d, cache.relu_masks[i])
        d, dw, db = layers.conv2d_backward(d, t[f"conv{i}.weight"], cache.conv_caches[i])
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    return grads


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Project vectors (single or row-stacked) onto the unit hypersphere."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateEmbedding("cannot L2-normalize a zero vector")
    return v / norms


def batch_tensor(patches: Sequence[PreprocessedPatch]) -> np.ndarray:
    return np.stack([p.tensor for p in patches]).astype(np.float32)


def embed_tensor(
    params: EncoderParameters, bank: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Embeddings (N, d) for a stacked patch tensor.

    The final short batch is zero-padded to the full batch size so every
    GEMM sees identical shapes, keeping embeddings bit-stable regardless
    of how the inputs are batched.
    """
    n = bank.shape[0]
    out = np.empty((n, params.config.embed_dim), dtype=np.float32)
    for start in range(0, n, batch_size):
        chunk = bank[start:start + batch_size]
        short = chunk.shape[0]
        if short < batch_size:
            pad = np.zeros((batch_size - short, *bank.shape[1:]), dtype=bank.dtype)
            chunk = np.concatenate([chunk, pad], axis=0)
        _, pre_norm, _ = forward(params, chunk)
        out[start:start + short] = l2_normalize(pre_norm[:short])
    return out


def embed(
    params: EncoderParameters,
    images: Iterable[IRImage],
    stats: Mapping[int, PlantStats],
    batch_size: int = 64,
) -> list[Embedding]:
    """preprocess -> forward -> l2_normalize for a collection of images."""
    patches = []
    for image in images:
        try:
            st = stats[image.plant_id]
        except KeyError:
            raise ThermoscanError(f"no plant stats for plant {image.plant_id}") from None
        patches.append(preprocess(image, st))
    if not patches:
        return []
    zs = embed_tensor(params, batch_tensor(patches), batch_size=batch_size)
    return [
        Embedding(
            z=zs[i],
            image_id=p.image_id,
            plant_id=p.plant_id,
            module_id=p.module_id,
            binary_label=p.binary_label,
            fault_class=p.fault_class,
        )
        for i, p in enumerate(patches)
    ]
