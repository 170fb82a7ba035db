"""Outlier removal and even re-sampling of raw SLAM clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .geometry import PointCloud
from .spatial import SpatialIndex, median_nn_spacing

DEFAULT_MIN_NEIGHBORS = 5
RADIUS_SPACING_FACTOR = 3.0
VOXEL_SPACING_FACTOR = 2.0


@dataclass(frozen=True)
class RadiusFilterParams:
    radius: float
    min_neighbors: int = DEFAULT_MIN_NEIGHBORS

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError("radius must be > 0")
        if int(self.min_neighbors) != self.min_neighbors or self.min_neighbors < 1:
            raise ParameterError("min_neighbors must be an integer >= 1")


@dataclass(frozen=True)
class VoxelFilterParams:
    voxel_size: float

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ParameterError("voxel_size must be > 0")


def default_filter_params(cloud: PointCloud) -> tuple[RadiusFilterParams, VoxelFilterParams]:
    """Scale-free defaults from the cloud's median nearest-neighbour spacing."""
    spacing = median_nn_spacing(cloud)
    if spacing <= 0:
        raise ParameterError("cloud has zero median spacing (duplicated points)")
    return (
        RadiusFilterParams(RADIUS_SPACING_FACTOR * spacing, DEFAULT_MIN_NEIGHBORS),
        VoxelFilterParams(VOXEL_SPACING_FACTOR * spacing),
    )


def neighbor_counts(cloud: PointCloud, radius: float) -> np.ndarray:
    """Number of OTHER points within ``radius`` (inclusive) of each point."""
    pairs = SpatialIndex(cloud).radius_pairs(radius)
    counts = np.bincount(pairs.ravel(), minlength=len(cloud))
    return counts.astype(np.int64)


def radius_outlier_removal(cloud: PointCloud, params: RadiusFilterParams) -> PointCloud:
    if len(cloud) == 0:
        return cloud
    keep = neighbor_counts(cloud, params.radius) >= params.min_neighbors
    return cloud.subset(np.nonzero(keep)[0])


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel coordinates, anchored at the minimum corner of the cloud."""
    origin = points.min(axis=0)
    return np.floor((points - origin) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, params: VoxelFilterParams) -> PointCloud:
    """Replace the members of each occupied voxel by their centroid.

    Output is ordered by voxel index (lexicographic in x, y, z). The centroid keeps
    the provenance of its lowest-index member. Normals are averaged and
    re-normalised; where the average is shorter than 1e-6 the averaged normal is
    discarded, the representative's normal stands in and its confidence is 0.
    """
    n = len(cloud)
    if n == 0:
        return cloud
    keys = voxel_keys(cloud.points, params.voxel_size)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    centroid = np.zeros((m, 3))
    np.add.at(centroid, inverse, cloud.points)
    centroid /= counts[:, None]

    # np.unique's return_index gives the first occurrence = lowest member index
    normals = None
    conf = None
    if cloud.confidence is not None:
        conf = np.full(m, np.inf)
        np.minimum.at(conf, inverse, cloud.confidence)
    if cloud.normals is not None:
        acc = np.zeros((m, 3))
        np.add.at(acc, inverse, cloud.normals)
        acc /= counts[:, None]
        length = np.linalg.norm(acc, axis=1)
        cancelled = length < 1e-6
        if np.any(cancelled):
            acc[cancelled] = cloud.normals[first[cancelled]]
            length[cancelled] = 1.0
            conf = np.ones(m) if conf is None else conf
            conf[cancelled] = 0.0
        normals = acc / length[:, None]
    frames = None if cloud.source_frame is None else cloud.source_frame[first]
    return PointCloud(centroid, normals, frames, conf)

