"""Training objectives: the contrastive anomaly loss and a cross-entropy baseline.

The contrastive loss is a temperature-scaled non-parametric softmax over
the batch. With N and A the index sets of normal and anomalous
embeddings and zbar the mean of the normal embeddings,

    L = -(1/|N|) * sum_{i in N} log( exp(z_i . zbar / tau)
                                     / sum_{j in N u A} exp(z_j . zbar / tau) )

Every normal embedding is pulled towards zbar while anomalies are pushed
away. The gradient is differentiated through zbar, which is itself a
function of the normal embeddings, and is returned in closed form:

    dL/ds_j   = p_j - [j in N]/|N|          (p = softmax of similarities)
    dL/dz_k   = ( dL/ds_k * zbar + [k in N] * w/|N| ) / tau
    with  w   = sum_j dL/ds_j * z_j

Similarities are max-subtracted before exponentiation so the loss stays
finite even for tau as small as 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateBatch, ThermoscanError

DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class BatchLabels:
    """Disjoint index sets of normal and anomalous samples covering a batch."""

    normal: tuple[int, ...]
    anomalous: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.normal) & set(self.anomalous)
        if overlap:
            raise ThermoscanError(f"indices in both classes: {sorted(overlap)}")

    @classmethod
    def from_flags(cls, is_anomalous: Sequence[bool]) -> "BatchLabels":
        normal = tuple(i for i, a in enumerate(is_anomalous) if not a)
        anomalous = tuple(i for i, a in enumerate(is_anomalous) if a)
        return cls(normal=normal, anomalous=anomalous)

    def size(self) -> int:
        return len(self.normal) + len(self.anomalous)


def normal_mean(z: np.ndarray, labels: BatchLabels) -> np.ndarray:
    """Arithmetic mean of the normal embeddings; not re-normalized."""
    if not labels.normal:
        raise DegenerateBatch("no normal samples in batch")
    return z[list(labels.normal)].mean(axis=0)


def contrastive_loss(
    z: np.ndarray, labels: BatchLabels, tau: float = DEFAULT_TAU
) -> tuple[float, np.ndarray]:
    """Loss value and exact gradient dL/dz for a batch of embeddings."""
    if not tau > 0:
        raise ThermoscanError(f"temperature must be > 0, got {tau}")
    z = np.asarray(z)
    if not np.isfinite(z).all():
        raise ThermoscanError("non-finite embeddings")
    if not labels.normal or not labels.anomalous:
        raise DegenerateBatch(
            f"contrastive batch needs both classes, got {len(labels.normal)} normal "
            f"and {len(labels.anomalous)} anomalous"
        )
    if labels.size() != z.shape[0]:
        raise ThermoscanError("labels do not cover the batch")

    n_normal = len(labels.normal)
    normal_idx = np.array(labels.normal)
    zbar = z[normal_idx].mean(axis=0)

    sims = z @ zbar / tau
    shift = sims.max()
    exp = np.exp(sims - shift)
    log_denom = np.log(exp.sum()) + shift
    loss = float(log_denom - sims[normal_idx].mean())

    p = exp / exp.sum()
    g = p.copy()
    g[normal_idx] -= 1.0 / n_normal
    w = g @ z
    dz = np.outer(g, zbar)
    dz[normal_idx] += w / n_normal
    dz /= tau
    return loss, dz


def cross_entropy_loss(
    logits: np.ndarray, labels: Sequence[int]
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over a batch of (N, 2) logits.

    Returns the loss and its gradient (softmax - onehot) / N.
    """
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ThermoscanError("non-finite logits")
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    if labels.shape[0] != n:
        raise ThermoscanError("labels do not cover the batch")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    """Probability of the anomalous class (column 1) for each row."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp[:, 1] / exp.sum(axis=1)
