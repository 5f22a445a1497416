"""Trajectory vocabulary: chunk segmentation, [-1, 1] normalization, k-means
anchors, positive-anchor assignment, and binary persistence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import ConfigError, DataError, DimensionError, FormatError, ShapeError

VOCAB_MAGIC = b"ANVC"
_CONST_PAD = 1e-6  # symmetric widening for constant dimensions


@dataclass(frozen=True)
class NormStats:
    """Per-dimension data range; maps [lo_k, hi_k] -> [-1, 1] affinely."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.hi <= self.lo):
            raise DataError("normalization stats require lo < hi per dimension")


@dataclass(frozen=True)
class AnchorVocabulary:
    anchors: np.ndarray  # (M, H, d), normalized units
    stats: NormStats

    @property
    def m(self) -> int:
        return self.anchors.shape[0]

    @property
    def horizon(self) -> int:
        return self.anchors.shape[1]

    @property
    def action_dim(self) -> int:
        return self.anchors.shape[2]

    @property
    def flat_anchors(self) -> np.ndarray:
        return self.anchors.reshape(self.m, -1)


def segment_chunks(episode: np.ndarray, horizon: int) -> np.ndarray:
    """Sliding windows of stride 1 over a (T, d) episode -> (N, H, d).

    T >= H gives T - H + 1 windows; a short episode yields one chunk padded
    by repeating the final action.
    """
    episode = np.asarray(episode, dtype=np.float64)
    if episode.ndim != 2 or episode.shape[0] < 1:
        raise DataError(f"episode must be a non-empty (T, d) array, got shape {episode.shape}")
    t = episode.shape[0]
    if t < horizon:
        pad = np.repeat(episode[-1:], horizon - t, axis=0)
        return np.concatenate([episode, pad], axis=0)[None, :, :]
    idx = np.arange(t - horizon + 1)[:, None] + np.arange(horizon)[None, :]
    return episode[idx]


def fit_norm(chunks: np.ndarray) -> NormStats:
    """Per-action-dimension min/max over every chunk entry."""
    chunks = np.asarray(chunks, dtype=np.float64)
    if chunks.size == 0:
        raise DataError("cannot fit normalization on an empty chunk list")
    flat = chunks.reshape(-1, chunks.shape[-1])
    lo = flat.min(axis=0)
    hi = flat.max(axis=0)
    const = hi - lo < _CONST_PAD
    lo = np.where(const, lo - _CONST_PAD, lo)
    hi = np.where(const, hi + _CONST_PAD, hi)
    return NormStats(lo=lo, hi=hi)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Affine map of the last axis from [lo, hi] to [-1, 1]; never clamps."""
    return 2.0 * (np.asarray(values, dtype=np.float64) - stats.lo) / (stats.hi - stats.lo) - 1.0


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) + 1.0) * (stats.hi - stats.lo) / 2.0 + stats.lo


def _kmeans_pp_init(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((m, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0.0:
            centroids[k:] = centroids[0]
            return centroids
        centroids[k] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centroids[k]) ** 2, axis=1))
    return centroids


def kmeans_fit(chunks: np.ndarray, m: int, rng: np.random.Generator, stats: NormStats,
               max_iters: int = 100) -> AnchorVocabulary:
    """Lloyd iterations with k-means++ seeding on flattened chunks.

    Squared Euclidean assignments (ties to the lowest index), mean centroids,
    empty clusters reseeded to the point farthest from its centroid. Stops
    when assignments stabilize or after ``max_iters``.
    """
    chunks = np.asarray(chunks, dtype=np.float64)
    if chunks.ndim != 3:
        raise DimensionError(f"expected (N, H, d) chunks, got shape {chunks.shape}")
    n, horizon, dim = chunks.shape
    if m < 1:
        raise ConfigError(f"anchor count must be >= 1, got {m}")
    if n < m:
        raise DataError(f"need at least {m} chunks to fit {m} anchors, got {n}")
    points = chunks.reshape(n, horizon * dim)
    centroids = _kmeans_pp_init(points, m, rng)
    labels = np.full(n, -1)
    for _ in range(max_iters):
        d2 = (
            np.sum(points * points, axis=1)[:, None]
            - 2.0 * points @ centroids.T
            + np.sum(centroids * centroids, axis=1)[None, :]
        )
        new_labels = np.argmin(d2, axis=1)
        min_d2 = d2[np.arange(n), new_labels]
        for k in range(m):
            mask = new_labels == k
            if mask.any():
                centroids[k] = points[mask].mean(axis=0)
            else:
                far = int(np.argmax(min_d2))
                centroids[k] = points[far]
                new_labels[far] = k
                min_d2[far] = 0.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return AnchorVocabulary(anchors=centroids.reshape(m, horizon, dim), stats=stats)


def kmeans_sse(chunks: np.ndarray, vocab: AnchorVocabulary) -> float:
    """Within-cluster sum of squares of chunks against their nearest anchor."""
    points = np.asarray(chunks, dtype=np.float64).reshape(len(chunks), -1)
    c = vocab.flat_anchors
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ c.T
        + np.sum(c * c, axis=1)[None, :]
    )
    return float(np.maximum(d2.min(axis=1), 0.0).sum())


def assign_positive(target: np.ndarray, vocab: AnchorVocabulary):
    """Index of the anchor with minimal L1 distance, plus its one-hot vector."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != vocab.anchors.shape[1:]:
        raise DimensionError(
            f"target shape {target.shape} != anchor shape {vocab.anchors.shape[1:]}"
        )
    dists = np.abs(vocab.flat_anchors - target.reshape(-1)[None, :]).sum(axis=1)
    m_star = int(np.argmin(dists))  # argmin takes the first minimum: ties to lowest index
    one_hot = np.zeros(vocab.m)
    one_hot[m_star] = 1.0
    return m_star, one_hot


def assign_positive_batch(targets: np.ndarray, vocab: AnchorVocabulary) -> np.ndarray:
    """Vectorized positive-anchor indices for (N, H, d) targets."""
    flat = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    anchors = vocab.flat_anchors
    out = np.empty(len(flat), dtype=np.int64)
    # Blocked to bound the (block, M, H*d) intermediate.
    block = max(1, 2_000_000 // max(1, anchors.size))
    for start in range(0, len(flat), block):
        seg = flat[start:start + block]
        d = np.abs(seg[:, None, :] - anchors[None, :, :]).sum(axis=2)
        out[start:start + block] = np.argmin(d, axis=1)
    return out


def nearest_anchor_distances(targets: np.ndarray, vocab: AnchorVocabulary) -> np.ndarray:
    """L1 distance (summed over entries) from each target to its nearest anchor."""
    flat = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    anchors = vocab.flat_anchors
    out = np.empty(len(flat))
    block = max(1, 2_000_000 // max(1, anchors.size))
    for start in range(0, len(flat), block):
        seg = flat[start:start + block]
        d = np.abs(seg[:, None, :] - anchors[None, :, :]).sum(axis=2)
        out[start:start + block] = d.min(axis=1)
    return out


def vocab_save(vocab: AnchorVocabulary, path) -> None:
    store = numkit.ParamStore()
    store.add("anchors", vocab.flat_anchors)
    store.add("lo", vocab.stats.lo[None, :])
    store.add("hi", vocab.stats.hi[None, :])
    numkit.save_params(
        store, path, magic=VOCAB_MAGIC,
        header_extra=(vocab.horizon, vocab.action_dim, vocab.m),
    )


def vocab_load(path, expect_horizon: int | None = None,
               expect_dim: int | None = None) -> AnchorVocabulary:
    store, (horizon, dim, m) = numkit.load_params(path, magic=VOCAB_MAGIC, n_extra=3)
    try:
        anchors = store.params["anchors"]
        lo = store.params["lo"][0]
        hi = store.params["hi"][0]
    except KeyError as exc:
        raise FormatError(f"vocabulary file missing tensor {exc}") from exc
    if anchors.shape != (m, horizon * dim) or lo.shape != (dim,) or hi.shape != (dim,):
        raise FormatError("vocabulary header inconsistent with stored tensors")
    if expect_horizon is not None and horizon != expect_horizon:
        raise ShapeError(f"vocabulary horizon {horizon} != expected {expect_horizon}")
    if expect_dim is not None and dim != expect_dim:
        raise ShapeError(f"vocabulary action dim {dim} != expected {expect_dim}")
    return AnchorVocabulary(
        anchors=anchors.reshape(m, horizon, dim),
        stats=NormStats(lo=lo, hi=hi),
    )
