"""In-memory store of labelled source embeddings with exact k-NN queries.

Queries run a full scan: Euclidean distances to every stored embedding,
exact k smallest with ties broken towards the lower index. Because all
embeddings are unit-norm, Euclidean and cosine distance produce the same
neighbor ranking. The index is immutable after construction and safe for
concurrent queries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import Embedding
from .errors import DegenerateEmbedding, ThermoscanError

DEFAULT_K = 100
DEFAULT_DELTA = 0.1

VERDICT_NORMAL = "normal"
VERDICT_ANOMALOUS = "anomalous"

KMEANS_MAX_ITER = 100
KMEANS_SHIFT_TOL = 1e-6


@dataclass(frozen=True)
class AnomalyIndex:
    vectors: np.ndarray        # (n, d) unit rows, float32
    labels: np.ndarray         # (n,) bool, True = anomalous
    image_ids: np.ndarray      # (n,) uint64
    plant_ids: np.ndarray      # (n,) uint16
    module_ids: np.ndarray     # (n,) uint32

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def anomaly_fraction(self) -> float:
        return float(self.labels.mean())


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray      # ascending
    anomaly_fraction: float


@dataclass(frozen=True)
class Prediction:
    image_id: int
    module_id: int
    score: float
    verdict: str
    k: int
    delta: float


@dataclass(frozen=True)
class ModuleVerdict:
    module_id: int
    score: float               # mean image score
    verdict: str
    n_images: int
    n_anomalous_verdicts: int


def build_index_arrays(vectors: np.ndarray, anomalous: np.ndarray, **identity) -> AnomalyIndex:
    """Construct an index from raw arrays; identity arrays default to zeros."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ThermoscanError("index needs a non-empty (n, d) embedding matrix")
    n = vectors.shape[0]
    anomalous = np.asarray(anomalous, dtype=bool)
    if anomalous.shape != (n,):
        raise ThermoscanError("labels must match the embedding count")
    arrays = {
        "image_ids": np.asarray(identity.get("image_ids", np.arange(n)), dtype=np.uint64),
        "plant_ids": np.asarray(identity.get("plant_ids", np.zeros(n)), dtype=np.uint16),
        "module_ids": np.asarray(identity.get("module_ids", np.zeros(n)), dtype=np.uint32),
    }
    for arr in (vectors, anomalous, *arrays.values()):
        arr.setflags(write=False)
    return AnomalyIndex(vectors=vectors, labels=anomalous, **arrays)


def build_index(embeddings: Sequence[Embedding]) -> AnomalyIndex:
    """Index a collection of labelled embeddings, preserving input order."""
    if not embeddings:
        raise ThermoscanError("cannot build an index from zero embeddings")
    dims = {e.z.shape[-1] for e in embeddings}
    if len(dims) != 1:
        raise ThermoscanError(f"mixed embedding dimensions: {sorted(dims)}")
    unlabelled = [e.image_id for e in embeddings if e.binary_label is None]
    if unlabelled:
        raise ThermoscanError(
            f"index requires labelled embeddings; unlabelled ids: {unlabelled[:5]}"
        )
    return build_index_arrays(
        np.stack([e.z for e in embeddings]),
        np.array([e.is_anomalous for e in embeddings], dtype=bool),
        image_ids=np.array([e.image_id for e in embeddings], dtype=np.uint64),
        plant_ids=np.array([e.plant_id for e in embeddings], dtype=np.uint16),
        module_ids=np.array([e.module_id for e in embeddings], dtype=np.uint32),
    )


def query(index: AnomalyIndex, z: np.ndarray, k: int) -> NeighborSet:
    """Exact k nearest stored embeddings by Euclidean distance."""
    if not 1 <= k <= index.count:
        raise ThermoscanError(f"k must lie in [1, {index.count}], got {k}")
    diff = index.vectors.astype(np.float64) - np.asarray(z, dtype=np.float64)
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    fraction = float(index.labels[order].sum()) / k
    return NeighborSet(indices=order, distances=dist[order], anomaly_fraction=fraction)


def classify(score: float, delta: float) -> str:
    """Anomalous iff the neighbor anomaly fraction strictly exceeds delta."""
    if not 0.0 <= score <= 1.0:
        raise ThermoscanError(f"score must lie in [0, 1], got {score}")
    if not 0.0 <= delta <= 1.0:
        raise ThermoscanError(f"delta must lie in [0, 1], got {delta}")
    return VERDICT_ANOMALOUS if score > delta else VERDICT_NORMAL


def predict_scores(index: AnomalyIndex, zs: np.ndarray, k: int) -> np.ndarray:
    """Neighbor anomaly fractions for a stack of query embeddings.

    Distances and tie handling follow exactly the same arithmetic as
    ``query``; queries are processed in blocks to bound memory.
    """
    if not 1 <= k <= index.count:
        raise ThermoscanError(f"k must lie in [1, {index.count}], got {k}")
    base = index.vectors.astype(np.float64)
    labels = index.labels.astype(np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    scores = np.empty(zs.shape[0], dtype=np.float64)
    block = max(1, 8_000_000 // max(index.count * index.dim, 1))
    for start in range(0, zs.shape[0], block):
        chunk = zs[start:start + block]
        diff = base[None, :, :] - chunk[:, None, :]
        dist = np.sqrt(np.sum(diff * diff, axis=2))
        top = np.argsort(dist, axis=1, kind="stable")[:, :k]
        scores[start:start + chunk.shape[0]] = labels[top].sum(axis=1) / k
    return scores


def predict_batch(
    index: AnomalyIndex,
    targets: Sequence[Embedding],
    k: int = DEFAULT_K,
    delta: float = DEFAULT_DELTA,
) -> list[Prediction]:
    """Per-embedding k-NN score and verdict for a target collection."""
    if not targets:
        return []
    if not 0.0 <= delta <= 1.0:
        raise ThermoscanError(f"delta must lie in [0, 1], got {delta}")
    zs = np.stack([e.z for e in targets])
    scores = predict_scores(index, zs, k)
    return [
        Prediction(
            image_id=e.image_id,
            module_id=e.module_id,
            score=float(s),
            verdict=classify(float(s), delta),
            k=k,
            delta=delta,
        )
        for e, s in zip(targets, scores)
    ]


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    min_d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    min_d2[chosen[0]] = -1.0
    while len(chosen) < k:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        d2 = np.sum((x - x[nxt]) ** 2, axis=1)
        min_d2 = np.minimum(min_d2, d2)
        min_d2[nxt] = -1.0
    return x[chosen].copy()


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means via Lloyd's algorithm with farthest-point seeding."""
    centroids = _farthest_point_init(x, k, rng)
    for _ in range(KMEANS_MAX_ITER):
        d2 = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * (x @ centroids.T)
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = x[assign == c]
            if members.shape[0] == 0:
                # Re-seed an empty cluster at the point farthest from its centroid.
                worst = int(np.argmax(np.min(d2, axis=1)))
                new_centroids[c] = x[worst]
            else:
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < KMEANS_SHIFT_TOL:
            break
    return centroids


def compress_index(index: AnomalyIndex, m: int, seed: int = 0) -> AnomalyIndex:
    """Replace the index by m k-means centroids, clustered per class.

    The budget m is split between the classes in proportion to their
    counts (each non-empty class keeps at least one centroid) so that
    centroids inherit labels; centroids are re-normalized onto the unit
    sphere. With m equal to the index size every embedding survives as
    its own singleton cluster.
    """
    if not 1 <= m <= index.count:
        raise ThermoscanError(f"m must lie in [1, {index.count}], got {m}")
    x = index.vectors.astype(np.float64)
    class_points = {
        True: x[index.labels],
        False: x[~index.labels],
    }
    counts = {cls: pts.shape[0] for cls, pts in class_points.items()}
    present = [cls for cls in (False, True) if counts[cls] > 0]
    if len(present) == 1:
        allocation = {present[0]: m}
    else:
        m_normal = int(np.floor(m * counts[False] / index.count + 0.5))
        m_normal = min(max(m_normal, 1), m - 1)
        allocation = {False: m_normal, True: m - m_normal}
    for cls in present:
        if allocation[cls] > counts[cls]:
            raise ThermoscanError(
                f"m={m} allocates {allocation[cls]} centroids to a class with only "
                f"{counts[cls]} embeddings"
            )

    rng = np.random.Generator(np.random.PCG64(seed))
    vectors = []
    labels = []
    for cls in present:
        k = allocation[cls]
        pts = class_points[cls]
        centroids = pts.copy() if k == pts.shape[0] else _lloyd(pts, k, rng)
        norms = np.linalg.norm(centroids, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateEmbedding("k-means produced a zero-norm centroid")
        vectors.append(centroids / norms)
        labels.extend([cls] * k)
    stacked = np.concatenate(vectors, axis=0).astype(np.float32)
    return build_index_arrays(stacked, np.array(labels, dtype=bool))


def aggregate_module(predictions: Sequence[Prediction]) -> ModuleVerdict:
    """Combine image predictions of one module: anomalous iff at least half
    the image verdicts are anomalous; the module score is the mean image score."""
    if not predictions:
        raise ThermoscanError("cannot aggregate zero predictions")
    module_ids = {p.module_id for p in predictions}
    if len(module_ids) != 1:
        raise ThermoscanError(f"predictions span multiple modules: {sorted(module_ids)}")
    n_anom = sum(1 for p in predictions if p.verdict == VERDICT_ANOMALOUS)
    n = len(predictions)
    return ModuleVerdict(
        module_id=predictions[0].module_id,
        score=float(np.mean([p.score for p in predictions])),
        verdict=VERDICT_ANOMALOUS if n_anom / n >= 0.5 else VERDICT_NORMAL,
        n_images=n,
        n_anomalous_verdicts=n_anom,
    )


def aggregate_all_modules(predictions: Sequence[Prediction]) -> list[ModuleVerdict]:
    by_module: dict[int, list[Prediction]] = {}
    for p in predictions:
        by_module.setdefault(p.module_id, []).append(p)
    return [aggregate_module(group) for _mid, group in sorted(by_module.items())]
