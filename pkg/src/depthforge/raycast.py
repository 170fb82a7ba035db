"""Mesh queries: projected point-in-triangle location, ray casting, closest points.

All three use the same idea of cheap candidate generation (2D bins or k-d trees)
followed by an exact per-pair test, so results do not depend on the acceleration
structure.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, CameraPose, TriangleMesh

_EDGE_EPS = 1e-12
_NEAR = 1e-6  # mm; triangles with a vertex closer to the camera plane are skipped
_PAIR_CHUNK = 2_000_000
_KNN_CANDIDATES = 8


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def locate_2d(tri2d: np.ndarray, queries: np.ndarray):
    """All (query, triangle) pairs where the query lies in the projected triangle.

    Returns ``(query_idx, tri_idx, bary)`` with barycentric weights ``bary`` (K, 3).
    Edges and vertices count as inside, so a query on a shared edge may appear
    once per adjacent triangle. Triangles with zero projected area are skipped.
    """
    tri2d = np.asarray(tri2d, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if len(tri2d) == 0 or len(queries) == 0:
        return empty
    a, b, c = tri2d[:, 0], tri2d[:, 1], tri2d[:, 2]
    area2 = _cross2(b - a, c - a)
    good = np.abs(area2) > 0
    tlo = tri2d.min(axis=1)
    thi = tri2d.max(axis=1)
    qlo = queries.min(axis=0)
    qhi = queries.max(axis=0)
    # drop triangles that cannot contain any query
    good &= np.all(thi >= qlo, axis=1) & np.all(tlo <= qhi, axis=1)
    tid = np.nonzero(good)[0]
    if len(tid) == 0:
        return empty

    # bin size: larger of the typical triangle extent and the query spacing
    span = np.maximum(qhi - qlo, 1e-12)
    tri_ext = np.median((thi - tlo)[tid], axis=0)
    q_spacing = span / max(np.sqrt(len(queries)), 1.0)
    cell = np.maximum(np.maximum(tri_ext, q_spacing), span / 4096)
    nb = np.floor(span / cell).astype(np.int64) + 1

    def bin_of(p):
        return np.clip(np.floor((p - qlo) / cell).astype(np.int64), 0, nb - 1)

    b0 = bin_of(tlo[tid])
    b1 = bin_of(thi[tid])
    counts = (b1[:, 0] - b0[:, 0] + 1) * (b1[:, 1] - b0[:, 1] + 1)
    rep = np.repeat(np.arange(len(tid)), counts)
    local = np.arange(len(rep)) - np.repeat(np.cumsum(counts) - counts, counts)
    width = (b1[:, 0] - b0[:, 0] + 1)[rep]
    bx = b0[rep, 0] + local % width
    by = b0[rep, 1] + local // width
    tri_bin = bx * nb[1] + by
    order = np.argsort(tri_bin, kind="stable")
    tri_bin = tri_bin[order]
    tri_of_bin = tid[rep[order]]
    starts = np.searchsorted(tri_bin, np.arange(nb[0] * nb[1]), side="left")
    ends = np.searchsorted(tri_bin, np.arange(nb[0] * nb[1]), side="right")

    qb = bin_of(queries)
    qbin = qb[:, 0] * nb[1] + qb[:, 1]
    ncand = ends[qbin] - starts[qbin]
    out_q, out_t, out_w = [], [], []
    # process queries in chunks bounded by the number of candidate pairs
    csum = np.cumsum(ncand)
    lo = 0
    while lo < len(queries):
        base = csum[lo - 1] if lo else 0
        hi = int(np.searchsorted(csum, base + _PAIR_CHUNK, side="right"))
        hi = max(hi, lo + 1)
        qi = np.arange(lo, hi)
        nc = ncand[qi]
        pq = np.repeat(qi, nc)
        off = np.arange(len(pq)) - np.repeat(np.cumsum(nc) - nc, nc)
        pt = tri_of_bin[starts[qbin[pq]] + off]
        p = queries[pq]
        ta, tb, tc = a[pt], b[pt], c[pt]
        d = area2[pt]
        s = _cross2(p - ta, tc - ta) / d
        t = _cross2(tb - ta, p - ta) / d
        w0 = 1.0 - s - t
        inside = (s >= -_EDGE_EPS) & (t >= -_EDGE_EPS) & (w0 >= -_EDGE_EPS)
        out_q.append(pq[inside])
        out_t.append(pt[inside])
        out_w.append(np.stack([w0[inside], s[inside], t[inside]], axis=1))
        lo = hi
    return np.concatenate(out_q), np.concatenate(out_t), np.concatenate(out_w)


def vertical_heights(mesh: TriangleMesh, xy: np.ndarray) -> np.ndarray:
    """Largest z where a vertical line through each (x, y) meets the mesh (NaN if none)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(xy), -np.inf)
    corners = mesh.corners
    q, t, w = locate_2d(corners[:, :, :2], xy)
    if len(q):
        z = np.einsum("ki,ki->k", w, corners[t, :, 2])
        np.maximum.at(out, q, z)
    out[np.isneginf(out)] = np.nan
    return out


def cast_pixels(mesh: TriangleMesh, intr: CameraIntrinsics, pose: CameraPose, pixels: np.ndarray):
    """First hit along the ray through each pixel position.

    Returns ``(distance, triangle)``: Euclidean distance from the camera centre
    to the hit in mm (``inf`` for a miss) and the hit triangle index (-1 for a miss).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dist = np.full(len(pixels), np.inf)
    tri = np.full(len(pixels), -1, dtype=np.int64)
    if len(mesh.triangles) == 0 or len(pixels) == 0:
        return dist, tri
    cam = pose.world_to_camera(mesh.vertices)
    corners = cam[mesh.triangles]
    front = np.all(corners[:, :, 2] > _NEAR, axis=1)
    tid = np.nonzero(front)[0]
    if len(tid) == 0:
        return dist, tri
    cz = corners[tid, :, 2]
    uv = np.stack([intr.fx * corners[tid, :, 0] / cz + intr.cx, intr.fy * corners[tid, :, 1] / cz + intr.cy], axis=-1)
    q, t, w = locate_2d(uv, pixels)
    if len(q) == 0:
        return dist, tri
    # perspective-correct depth: 1/z is affine in screen space
    inv_z = np.einsum("ki,ki->k", w, 1.0 / cz[t])
    z = 1.0 / inv_z
    rays = intr.pixel_rays(pixels[q, 0], pixels[q, 1])
    rng = z * np.linalg.norm(rays, axis=1)
    order = np.lexsort((tid[t], rng, q))
    q, t, rng = q[order], t[order], rng[order]
    first = np.ones(len(q), dtype=bool)
    first[1:] = q[1:] != q[:-1]
    dist[q[first]] = rng[first]
    tri[q[first]] = tid[t[first]]
    return dist, tri


def ray_plane_hits(mesh: TriangleMesh, origin: np.ndarray, directions: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact intersection of each ray with the plane of its (already chosen) triangle."""
    c = mesh.corners[tri]
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    t = np.einsum("ij,ij->i", n, c[:, 0] - origin) / np.einsum("ij,ij->i", n, directions)
    return origin + t[:, None] * directions


def _closest_on_triangles(p, a, b, c):
    """Closest point to ``p`` on triangles (a, b, c), all (K, 3).

    Voronoi-region tests after Ericson; later ``np.where`` calls take precedence,
    so regions are applied from lowest to highest priority.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + v_in[:, None] * ab + w_in[:, None] * ac  # interior

        v_ab = d1 / (d1 - d3)
        v_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    out = np.where(cond_bc[:, None], b + w_bc[:, None] * (c - b), out)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(cond_ac[:, None], a + v_ac[:, None] * ac, out)
    cond_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(cond_c[:, None], c, out)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(cond_ab[:, None], a + v_ab[:, None] * ab, out)
    cond_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(cond_b[:, None], b, out)
    cond_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(cond_a[:, None], a, out)
    return out


class MeshDistance:
    """Exact closest-point queries against a fixed triangle mesh."""

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise ValueError("closest-point queries need a mesh with triangles")
        self.mesh = mesh
        corners = mesh.corners
        self._a, self._b, self._c = corners[:, 0], corners[:, 1], corners[:, 2]
        self._centroid = corners.mean(axis=1)
        self._radius = np.linalg.norm(corners - self._centroid[:, None, :], axis=2).max(axis=1)
        self._rmax = float(self._radius.max())
        self._ctree = cKDTree(self._centroid)

    def _best(self, pts, q, t, best_d, best_p, best_t):
        """Fold candidate pairs (q, t), grouped by ascending q, into the running best."""
        if len(q) == 0:
            return
        cp = _closest_on_triangles(pts[q], self._a[t], self._b[t], self._c[t])
        d = np.linalg.norm(pts[q] - cp, axis=1)
        starts = np.flatnonzero(np.r_[True, q[1:] != q[:-1]])
        group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(q)]))
        dmin = np.minimum.reduceat(d, starts)
        # ties resolved toward the lower triangle index
        tmin = np.minimum.reduceat(np.where(d == dmin[group], t, np.iinfo(np.int64).max), starts)
        pick = np.flatnonzero((d == dmin[group]) & (t == tmin[group]))
        qq, tt, dd, cc = q[pick], t[pick], d[pick], cp[pick]
        better = (dd < best_d[qq]) | ((dd == best_d[qq]) & (tt < best_t[qq]))
        qq, tt, dd, cc = qq[better], tt[better], dd[better], cc[better]
        best_d[qq], best_p[qq], best_t[qq] = dd, cc, tt

    def query(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(distance, closest point, triangle index) for each query point.

        Candidates are the triangles with the nearest centroids. A triangle whose
        centroid is farther than (best distance + largest circumradius) cannot win,
        so queries whose candidate list does not reach that far are exact; the
        others are redone with a ball query of exactly that radius.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(pts)
        best_d = np.full(n, np.inf)
        best_p = np.zeros((n, 3))
        best_t = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return best_d, best_p, best_t
        k = min(_KNN_CANDIDATES, len(self._centroid))
        cd, ci = self._ctree.query(pts, k=k)
        cd, ci = cd.reshape(n, k), ci.reshape(n, k)
        self._best(pts, np.repeat(np.arange(n), k), ci.ravel(), best_d, best_p, best_t)
        if k < len(self._centroid):
            bound = best_d * (1 + 1e-9) + self._rmax + 1e-12
            redo = np.nonzero(cd[:, -1] <= bound)[0]
            step = max(1, _PAIR_CHUNK // len(self._centroid))
            for lo in range(0, len(redo), step):
                sel = redo[lo:lo + step]
                cand = self._ctree.query_ball_point(pts[sel], bound[sel])
                lens = np.array([len(c) for c in cand], dtype=np.int64)
                flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand])
                self._best(pts, np.repeat(sel, lens), flat, best_d, best_p, best_t)
        return best_d, best_p, best_t


def closest_points(mesh: TriangleMesh, points):
    return MeshDistance(mesh).query(points)
