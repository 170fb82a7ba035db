"""k-d tree spatial index with exact, deterministic query semantics.

Queries go through :class:`scipy.spatial.cKDTree` for candidate generation, then
every candidate distance is recomputed here so that the inclusive radius test and
the ascending-index tie break do not depend on the tree's internal rounding.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError
from .geometry import PointCloud

# relative slack for candidate generation; exact filtering happens afterwards
_SLACK = 1e-9


def default_workers() -> int:
    env = os.environ.get("DEPTHFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return -1


def _dist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points - center, axis=-1)


class SpatialIndex:
    """Immutable index over the positions of a cloud (or a raw (N, 3) array)."""

    def __init__(self, cloud, workers: int | None = None):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        pts = pts.reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ParameterError("cannot index non-finite coordinates")
        self.points = pts
        self.points.flags.writeable = False
        self.workers = default_workers() if workers is None else workers
        self._tree = cKDTree(pts, balanced_tree=True) if len(pts) else None

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Indices with ``||p - center|| <= radius``, ascending."""
        if not radius > 0:
            raise ParameterError(f"radius must be positive, got {radius}")
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        center = np.asarray(center, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(center, radius * (1 + _SLACK) + 1e-300), dtype=np.int64)
        if len(cand) == 0:
            return cand
        keep = _dist(self.points[cand], center) <= radius
        return np.sort(cand[keep])

    def radius_pairs(self, radius: float) -> np.ndarray:
        """All unordered pairs (i < j) with ``||p_i - p_j|| <= radius``."""
        if not radius > 0:
            raise ParameterError(f"radius must be positive, got {radius}")
        if self._tree is None:
            return np.zeros((0, 2), dtype=np.int64)
        pairs = self._tree.query_pairs(radius * (1 + _SLACK) + 1e-300, output_type="ndarray")
        if len(pairs) == 0:
            return pairs.reshape(0, 2).astype(np.int64)
        d = _dist(self.points[pairs[:, 0]], self.points[pairs[:, 1]])
        return pairs[d <= radius].astype(np.int64)

    def knn_query(self, center, k: int) -> np.ndarray:
        """The ``k`` nearest indices ordered by (distance, index)."""
        return self.knn_query_batch(np.asarray(center, dtype=np.float64).reshape(1, 3), k)[0]

    def knn_query_batch(self, centers, k: int) -> np.ndarray:
        """Row-wise :meth:`knn_query` for an (M, 3) array; returns (M, min(k, N))."""
        if k < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        kk = min(k, n)
        if kk == 0:
            return np.zeros((len(centers), 0), dtype=np.int64)
        # one extra neighbour reveals ties straddling the k-th position
        q = min(kk + 1, n)
        _, idx = self._tree.query(centers, k=q, workers=self.workers)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(centers), q)
        d = _dist(self.points[idx], centers[:, None, :])
        order = np.lexsort((idx, d), axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        out = idx[:, :kk].copy()
        if q > kk:
            tied = np.nonzero(d[:, kk - 1] >= d[:, kk])[0]
            for row in tied:
                out[row] = self._knn_exact(centers[row], kk, d[row, kk - 1])
        return out

    def _knn_exact(self, center, k, dk) -> np.ndarray:
        cand = np.asarray(self._tree.query_ball_point(center, dk * (1 + _SLACK) + 1e-300), dtype=np.int64)
        d = _dist(self.points[cand], center)
        order = np.lexsort((cand, d))
        return cand[order[:k]]

    def nearest_distance(self, centers) -> tuple[np.ndarray, np.ndarray]:
        """Distance and index of the nearest indexed point for each centre."""
        d, i = self._tree.query(np.asarray(centers, dtype=np.float64).reshape(-1, 3), k=1, workers=self.workers)
        return d, i


def build_spatial_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    return index.radius_query(center, radius)


def knn_query(index: SpatialIndex, center, k: int) -> np.ndarray:
    return index.knn_query(center, k)


def median_nn_spacing(points) -> float:
    """Median distance from each point to its nearest other point."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise ParameterError("need at least two points for a spacing estimate")
    tree = cKDTree(pts)
    d, _ = tree.query(pts, k=2, workers=default_workers())
    return float(np.median(d[:, 1]))
