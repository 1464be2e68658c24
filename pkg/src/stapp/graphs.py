"""Pattern-graph and region-graph construction.

Pattern graphs connect mined patterns within a region by thresholded Jaccard
similarity of their presence histories; region graphs connect regions either
by a Gaussian kernel over geographic distance or by Jaccard similarity of
their (pattern, year) presence sets.  All adjacencies are symmetric with
entries in [0, 1] and a forced unit diagonal so no node is isolated under
degree normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import PatternVocabulary, RegionMeta

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class GraphConfig:
    delta: float = 0.8  # pattern-graph threshold
    eta: float = 0.8    # distance region-graph threshold
    kappa: float = 0.8  # jaccard region-graph threshold

    def __post_init__(self):
        for name in ("delta", "eta", "kappa"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class PatternGraph:
    """Weighted pattern adjacency for one region (fixed across timesteps)."""

    region_id: int
    adjacency: np.ndarray  # (N, N) float64


@dataclass(frozen=True)
class RegionGraph:
    adjacency: np.ndarray  # (K, K) float64
    kind: str              # "distance" | "jaccard"
    params: dict = field(default_factory=dict)


def pattern_base_encodings(vocab: PatternVocabulary, n_antibiotics: int) -> np.ndarray:
    """Signed one-hot sums: +1 per resistant item, -1 per sensitive item."""
    h = np.zeros((vocab.size, n_antibiotics), dtype=np.float64)
    for u, pat in enumerate(vocab.patterns):
        for m, s in pat.items:
            if m >= n_antibiotics:
                raise ValueError(f"pattern touches antibiotic {m} >= M={n_antibiotics}")
            h[u, m] = 1.0 if s == "R" else -1.0
    return h


def encode_patterns(
    vocab: PatternVocabulary, n_antibiotics: int, presence: np.ndarray
) -> np.ndarray:
    """Per-pattern encodings for one timestep: [signed one-hots ; presence bit]."""
    presence = np.asarray(presence, dtype=np.float64)
    if presence.shape != (vocab.size,):
        raise ValueError(f"presence must have shape ({vocab.size},)")
    h = pattern_base_encodings(vocab, n_antibiotics)
    return np.concatenate([h, presence[:, None]], axis=1)


def pattern_jaccard(presence: np.ndarray) -> np.ndarray:
    """Jaccard similarity of pattern presence histories.

    ``presence`` is (T, N) binary over training timesteps.  Empty-history
    pairs (0/0) get similarity 0, so a pattern never seen in this region has
    a zero row including its own diagonal.
    """
    q = np.asarray(presence, dtype=np.float64)
    if q.ndim != 2:
        raise ValueError("presence must be (T, N)")
    inter = q.T @ q
    counts = q.sum(axis=0)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        j = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return j


def threshold_adjacency(similarity: np.ndarray, threshold: float) -> np.ndarray:
    """Keep entries strictly above the threshold, zero the rest."""
    sim = np.asarray(similarity, dtype=np.float64)
    return np.where(sim > threshold, sim, 0.0)


def build_pattern_graph(
    region_id: int, presence_train: np.ndarray, delta: float
) -> PatternGraph:
    """Thresholded Jaccard pattern graph with a forced unit diagonal.

    The diagonal is set to 1 even for patterns never present in this region
    so that graph convolution keeps every node's own signal well defined.
    """
    a = threshold_adjacency(pattern_jaccard(presence_train), delta)
    np.fill_diagonal(a, 1.0)
    return PatternGraph(region_id=region_id, adjacency=a)


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    """Great-circle distance in kilometers."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a)))


def region_graph_distance(metas: Sequence[RegionMeta], eta: float) -> RegionGraph:
    """Gaussian-kernel region graph over great-circle distances.

    The kernel bandwidth is the population standard deviation of the
    pairwise distances (the single distance itself when K = 2, which makes
    the lone pair scale invariant).  All regions at one point is an error.
    """
    k = len(metas)
    if k < 2:
        raise ValueError("need at least two regions")
    dist = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d = haversine_km(
                metas[i].latitude, metas[i].longitude,
                metas[j].latitude, metas[j].longitude,
            )
            dist[i, j] = dist[j, i] = d
    pairs = dist[np.triu_indices(k, 1)]
    sigma = float(pairs[0]) if pairs.size == 1 else float(np.std(pairs))
    if sigma == 0.0:
        raise ValueError("all regions are at one point; distance kernel undefined")
    kernel = np.exp(-(dist ** 2) / sigma ** 2)
    a = threshold_adjacency(kernel, eta)
    np.fill_diagonal(a, 1.0)
    return RegionGraph(adjacency=a, kind="distance", params={"eta": eta, "sigma": sigma})


def region_graph_jaccard(presence_train: np.ndarray, kappa: float) -> RegionGraph:
    """Jaccard region graph over (pattern, year) presence sets.

    ``presence_train`` is (K, T, N) binary over training years.  Item sets
    are (pattern, year) pairs, so two regions must share patterns in the
    same years to be similar.
    """
    q = np.asarray(presence_train, dtype=np.float64)
    if q.ndim != 3:
        raise ValueError("presence must be (K, T, N)")
    flat = q.reshape(q.shape[0], -1)
    inter = flat @ flat.T
    counts = flat.sum(axis=1)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        j = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    a = threshold_adjacency(j, kappa)
    np.fill_diagonal(a, 1.0)
    return RegionGraph(adjacency=a, kind="jaccard", params={"kappa": kappa})
