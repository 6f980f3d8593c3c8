"""Instance-restricted k-nearest-neighbour graph with feature-similarity weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

EXHAUSTIVE_LIMIT = 2048


@dataclass
class NeighborGraph:
    """Padded neighbour table; ``-1`` marks an empty slot.

    ``weights`` are cosine similarities of the feature vectors,
    ``distances`` the 3D distances at build time and ``softmax_weights`` the
    row-wise softmax of ``weights`` over the occupied slots.
    """

    neighbor_indices: np.ndarray
    weights: np.ndarray
    softmax_weights: np.ndarray
    distances: np.ndarray
    built_at_time: int
    k: int

    @property
    def mask(self) -> np.ndarray:
        return self.neighbor_indices >= 0

    def __len__(self) -> int:
        return len(self.neighbor_indices)

    def edges(self):
        """``(i, j, slot_mask)`` flattened over occupied slots."""
        mask = self.mask
        rows = np.broadcast_to(np.arange(len(self))[:, None], mask.shape)
        return rows[mask], self.neighbor_indices[mask], mask


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.maximum(na * nb, 1e-12)
    return np.clip(np.sum(a * b, axis=-1) / denom, -1.0, 1.0)


def _nearest(d2: np.ndarray, m: int) -> np.ndarray:
    """Columns of the ``m`` smallest entries per row, ordered by (value, column)."""
    extra = min(d2.shape[1], m + 8)
    if extra < d2.shape[1]:
        # over-fetch so ties at the boundary can still be ordered by index
        part = np.sort(np.argpartition(d2, extra - 1, axis=1)[:, :extra], axis=1)
    else:
        part = np.broadcast_to(np.arange(d2.shape[1]), d2.shape)
    order = np.argsort(np.take_along_axis(d2, part, 1), axis=1, kind="stable")[:, :m]
    return np.take_along_axis(part, order, 1)


def _candidates(points: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """``m`` nearest other points per row, ordered by (distance, index)."""
    n = len(points)
    if n <= EXHAUSTIVE_LIMIT:
        order = np.empty((n, m), dtype=np.int64)
        dist = np.empty((n, m))
        for lo in range(0, n, 512):
            hi = min(n, lo + 512)
            d2 = np.sum((points[lo:hi, None, :] - points[None, :, :]) ** 2, axis=-1)
            d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
            o = _nearest(d2, m)
            order[lo:hi] = o
            dist[lo:hi] = np.sqrt(np.take_along_axis(d2, o, axis=1))
        return order, dist
    extra = min(n, m + 1 + 8)
    dist, idx = cKDTree(points).query(points, k=extra)
    dist = np.where(idx == np.arange(n)[:, None], np.inf, dist)
    by_index = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, by_index, 1)
    dist = np.take_along_axis(dist, by_index, 1)
    resort = np.argsort(dist, axis=1, kind="stable")[:, :m]
    return np.take_along_axis(idx, resort, 1), np.take_along_axis(dist, resort, 1)


def build_instance_knn(means: np.ndarray, features: np.ndarray, instance_ids: np.ndarray,
                       k: int = 20, time: int = 0, select: str = "max_sim",
                       instance_guided: bool = True) -> NeighborGraph:
    """kNN graph: 2k spatial candidates per instance, then the k most similar.

    With ``select="min_sim"`` the k least similar candidates are kept instead.
    Instances with a single member get an empty row.
    """
    if select not in ("max_sim", "min_sim"):
        raise ValueError(f"unknown knn selection '{select}'")
    n = len(means)
    nbr = np.full((n, k), -1, dtype=np.int64)
    sims = np.zeros((n, k))
    dists = np.zeros((n, k))
    groups = np.unique(instance_ids) if instance_guided else [None]
    for gid in groups:
        members = np.flatnonzero(instance_ids == gid) if gid is not None else np.arange(n)
        size = len(members)
        if size < 2:
            continue
        kk = min(k, size - 1)
        cand, cdist = _candidates(means[members], min(2 * k, size - 1))
        csim = cosine_similarity(features[members][:, None, :], features[members][cand])
        key = -csim if select == "max_sim" else csim
        # stable on the distance-ordered candidate list, so similarity ties keep spatial order
        pick = np.argsort(key, axis=1, kind="stable")[:, :kk]
        nbr[members, :kk] = members[np.take_along_axis(cand, pick, 1)]
        sims[members, :kk] = np.take_along_axis(csim, pick, 1)
        dists[members, :kk] = np.take_along_axis(cdist, pick, 1)

    mask = nbr >= 0
    logits = np.where(mask, sims, -np.inf)
    rowmax = np.max(np.where(mask, sims, -1.0), axis=1, keepdims=True)
    ex = np.where(mask, np.exp(logits - rowmax), 0.0)
    total = ex.sum(axis=1, keepdims=True)
    soft = np.divide(ex, total, out=np.zeros_like(ex), where=total > 0)
    return NeighborGraph(nbr, sims, soft, dists, time, k)


def build_graph_for_cloud(cloud, time: int, k: int = 20, select: str = "max_sim",
                          instance_guided: bool = True) -> NeighborGraph:
    p = cloud.params_at(time)
    return build_instance_knn(p["means"], p["features"], p["instance_ids"], k, time, select,
                              instance_guided)
