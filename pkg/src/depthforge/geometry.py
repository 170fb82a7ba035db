"""Core geometry types.

All lengths are millimetres. Quaternions are Hamilton, stored ``(qx, qy, qz, qw)``
and describe camera-to-world rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParameterError

UNIT_NORMAL_TOL = 1e-6
QUAT_NORM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _as_points(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParameterError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite coordinates")
    return arr


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or stack of them) for ``(qx, qy, qz, qw)`` quaternions."""
    return Rotation.from_quat(np.asarray(q, dtype=np.float64)).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    q = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    # canonical sign: qw >= 0
    return np.where(q[..., 3:4] < 0, -q, q)


def _check_quat(q: np.ndarray, name: str = "rotation") -> None:
    norms = np.linalg.norm(q, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= QUAT_NORM_TOL):
        raise ParameterError(f"{name} quaternion is not unit length (norm {norms!r})")


@dataclass(frozen=True)
class PointCloud:
    """Points with optional unit normals, keyframe provenance and normal confidence.

    ``confidence`` is 0 for points whose normal could not be estimated reliably.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    source_frame: np.ndarray | None = None
    confidence: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points, "points")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if len(nrm) != n:
                raise ParameterError(f"{len(nrm)} normals for {n} points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > UNIT_NORMAL_TOL):
                bad = int(np.argmax(np.abs(lengths - 1.0)))
                raise ParameterError(f"normal {bad} is not unit length ({lengths[bad]})")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.source_frame is not None:
            sf = np.asarray(self.source_frame)
            if sf.size == 0:
                sf = sf.reshape(0)
            if sf.shape != (n,):
                raise ParameterError(f"source_frame has shape {sf.shape}, expected ({n},)")
            if sf.dtype.kind == "f":
                if not np.all(np.isfinite(sf)) or np.any(sf != np.round(sf)):
                    raise ParameterError("source_frame must hold integers")
            sf = sf.astype(np.int64)
            if np.any(sf < 0):
                raise ParameterError("source_frame must be >= 0")
            object.__setattr__(self, "source_frame", _frozen(sf))
        if self.confidence is not None:
            c = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
            if c.shape != (n,):
                raise ParameterError(f"confidence has shape {c.shape}, expected ({n},)")
            object.__setattr__(self, "confidence", _frozen(c))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, index) -> "PointCloud":
        """Cloud restricted to ``index`` (integer array or boolean mask), fields carried."""
        index = np.asarray(index)
        return PointCloud(
            self.points[index],
            None if self.normals is None else self.normals[index],
            None if self.source_frame is None else self.source_frame[index],
            None if self.confidence is None else self.confidence[index],
        )

    def replace(self, **changes) -> "PointCloud":
        return replace(self, **changes)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ParameterError("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _as_points(self.vertices, "vertices")
        t = np.asarray(self.triangles)
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise ParameterError(f"triangles must have shape (T, 3), got {t.shape}")
        if t.dtype.kind == "f":
            if np.any(t != np.round(t)):
                raise ParameterError("triangle indices must be integers")
        t = t.astype(np.int64)
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                raise ParameterError("triangle index out of range")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ParameterError("degenerate triangle (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle corner positions."""
        return self.vertices[self.triangles]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        if normalize:
            length = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(length > 0, length, 1.0)
        return n

    def edge_use_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edge_count(self) -> int:
        if len(self.triangles) == 0:
            return 0
        _, counts = self.edge_use_counts()
        return int(np.sum(counts == 1))

    def is_closed(self) -> bool:
        if len(self.triangles) == 0:
            return False
        _, counts = self.edge_use_counts()
        return bool(np.all(counts == 2))

    def compact(self) -> "TriangleMesh":
        """Drop unreferenced vertices."""
        used, inverse = np.unique(self.triangles, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))


@dataclass(frozen=True)
class CameraPose:
    frame_id: int
    rotation: np.ndarray  # (qx, qy, qz, qw), camera-to-world
    translation: np.ndarray  # camera centre in world, mm

    def __post_init__(self):
        if int(self.frame_id) < 0:
            raise ParameterError("frame_id must be >= 0")
        object.__setattr__(self, "frame_id", int(self.frame_id))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        _check_quat(q)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ParameterError("non-finite translation")
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        # x_cam = R^T (x - c)
        return (np.asarray(points) - self.translation) @ self.matrix


@dataclass(frozen=True)
class Trajectory:
    """Camera poses stored column-wise; iterate to get :class:`CameraPose` objects."""

    frame_ids: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.frame_ids).reshape(-1)
        if ids.dtype.kind == "f" and np.any(ids != np.round(ids)):
            raise ParameterError("frame ids must be integers")
        ids = ids.astype(np.int64)
        q = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        t = _as_points(self.translations, "translations")
        if not (len(ids) == len(q) == len(t)):
            raise ParameterError("frame_ids, rotations and translations differ in length")
        if np.any(ids < 0):
            raise ParameterError("frame ids must be >= 0")
        if np.any(np.diff(ids) <= 0):
            raise ParameterError("frame ids must be strictly increasing")
        if len(q):
            _check_quat(q)
        object.__setattr__(self, "frame_ids", _frozen(ids))
        object.__setattr__(self, "rotations", _frozen(q))
        object.__setattr__(self, "translations", _frozen(t))

    @classmethod
    def from_poses(cls, poses) -> "Trajectory":
        poses = list(poses)
        if not poses:
            return cls(np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros((0, 3)))
        return cls(
            np.array([p.frame_id for p in poses]),
            np.array([p.rotation for p in poses]),
            np.array([p.translation for p in poses]),
        )

    def __len__(self) -> int:
        return len(self.frame_ids)

    def __getitem__(self, i: int) -> CameraPose:
        return CameraPose(self.frame_ids[i], self.rotations[i], self.translations[i])

    def __iter__(self) -> Iterator[CameraPose]:
        for i in range(len(self)):
            yield self[i]

    @property
    def poses(self) -> list[CameraPose]:
        return list(self)

    def index_of(self, frame_id: int) -> int:
        i = int(np.searchsorted(self.frame_ids, frame_id))
        if i >= len(self) or self.frame_ids[i] != frame_id:
            raise KeyError(frame_id)
        return i

    def pose(self, frame_id: int) -> CameraPose:
        return self[self.index_of(frame_id)]

    def nearest_index(self, frame_ids) -> np.ndarray:
        """Index of the pose whose frame id is closest to each query (ties: earlier pose)."""
        if len(self) == 0:
            raise ParameterError("empty trajectory")
        f = np.asarray(frame_ids, dtype=np.int64)
        hi = np.clip(np.searchsorted(self.frame_ids, f), 0, len(self) - 1)
        lo = np.clip(hi - 1, 0, len(self) - 1)
        pick_lo = np.abs(self.frame_ids[lo] - f) <= np.abs(self.frame_ids[hi] - f)
        return np.where(pick_lo, lo, hi)

    def subset(self, index) -> "Trajectory":
        index = np.asarray(index)
        return Trajectory(self.frame_ids[index], self.rotations[index], self.translations[index])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ParameterError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self, u, v) -> np.ndarray:
        """Camera-frame ray directions (z = 1) through pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R x + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ParameterError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        _check_quat(q)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ParameterError("non-finite translation")
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R, translation, scale: float = 1.0) -> "SimilarityTransform":
        return cls(scale, matrix_to_quat(R), translation)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply_points(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        R = self.matrix
        if np.array_equal(R, np.eye(3)):
            out = p * self.scale if self.scale != 1.0 else p.copy()
        else:
            out = self.scale * (p @ R.T)
        if np.any(self.translation != 0):
            out = out + self.translation
        return out

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """The transform applying ``other`` first, then ``self``."""
        R = self.matrix @ other.matrix
        t = self.scale * (self.matrix @ other.translation) + self.translation
        return SimilarityTransform.from_matrix(R, t, self.scale * other.scale)

    def inverse(self) -> "SimilarityTransform":
        Rt = self.matrix.T
        s = 1.0 / self.scale
        return SimilarityTransform.from_matrix(Rt, -s * (Rt @ self.translation), s)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation_xyzw": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


Transformable = Union[PointCloud, TriangleMesh, Trajectory]


def apply_transform(t: SimilarityTransform, x: Transformable) -> Transformable:
    """Map positions by ``t``; normals and camera orientations are only rotated."""
    if isinstance(x, PointCloud):
        normals = None
        if x.normals is not None:
            normals = x.normals @ t.matrix.T
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(t.apply_points(x.points), normals, x.source_frame, x.confidence)
    if isinstance(x, TriangleMesh):
        return TriangleMesh(t.apply_points(x.vertices), x.triangles)
    if isinstance(x, Trajectory):
        if len(x) == 0:
            return x
        R = t.matrix @ quat_to_matrix(x.rotations)
        return Trajectory(x.frame_ids, matrix_to_quat(R), t.apply_points(x.translations))
    raise TypeError(f"cannot transform {type(x).__name__}")
