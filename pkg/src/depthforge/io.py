"""File formats: ASCII PLY, trajectory CSV, intrinsics JSON, 16-bit PGM depth maps.

Every parser rejects NaN/Inf and count mismatches with a line-numbered
:class:`~depthforge.errors.FormatError`.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import CameraIntrinsics, PointCloud, Trajectory, TriangleMesh

TRAJECTORY_HEADER = "frame,tx,ty,tz,qx,qy,qz,qw"
DEPTH_UNITS_PER_MM = 10  # PGM stores 0.1 mm per unit

_PLY_SCALARS = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# PLY


class _Element:
    def __init__(self, name, count, line):
        self.name = name
        self.count = count
        self.line = line
        self.props: list[tuple[str, bool]] = []  # (name, is_list)


def _parse_header(lines, path):
    if not lines or lines[0].strip() != "ply":
        raise FormatError("missing 'ply' magic", path, 1)
    elements: list[_Element] = []
    fmt = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        key = tok[0]
        if key == "format":
            fmt = tok[1] if len(tok) > 1 else None
            if fmt != "ascii":
                raise FormatError(f"unsupported PLY format {fmt!r} (only ascii)", path, i)
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(tok) != 3:
                raise FormatError("malformed element line", path, i)
            try:
                count = int(tok[2])
            except ValueError:
                raise FormatError(f"bad element count {tok[2]!r}", path, i) from None
            if count < 0:
                raise FormatError("negative element count", path, i)
            elements.append(_Element(tok[1], count, i))
        elif key == "property":
            if not elements:
                raise FormatError("property before any element", path, i)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5:
                    raise FormatError("malformed list property", path, i)
                elements[-1].props.append((tok[4], True))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_SCALARS:
                    raise FormatError(f"malformed property line {raw.strip()!r}", path, i)
                elements[-1].props.append((tok[2], False))
        elif key == "end_header":
            if fmt is None:
                raise FormatError("missing format line", path, i)
            return elements, i
        else:
            raise FormatError(f"unknown header keyword {key!r}", path, i)
    raise FormatError("missing end_header", path, len(lines))


def _float(tok, path, line):
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"not a number: {tok!r}", path, line) from None
    if not math.isfinite(v):
        raise FormatError(f"non-finite value {tok!r}", path, line)
    return v


def read_ply(path) -> dict:
    """Parse an ASCII PLY into ``{element_name: {property: array}}``.

    List properties come back as lists of integer tuples.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    elements, header_end = _parse_header(lines, path)
    out: dict[str, dict] = {}
    lineno = header_end
    body = lines[header_end:]
    pos = 0
    for el in elements:
        scalars: dict[str, list] = {name: [] for name, is_list in el.props if not is_list}
        lists: dict[str, list] = {name: [] for name, is_list in el.props if is_list}
        for _ in range(el.count):
            while pos < len(body) and not body[pos].strip():
                pos += 1
            if pos >= len(body):
                raise FormatError(
                    f"expected {el.count} '{el.name}' records, file ended early", path, lineno + pos + 1
                )
            line = lineno + pos + 1
            tok = body[pos].split()
            pos += 1
            j = 0
            for name, is_list in el.props:
                if j >= len(tok):
                    raise FormatError(f"too few values in '{el.name}' record", path, line)
                if is_list:
                    try:
                        n = int(tok[j])
                    except ValueError:
                        raise FormatError(f"bad list length {tok[j]!r}", path, line) from None
                    vals = tok[j + 1: j + 1 + n]
                    if len(vals) != n:
                        raise FormatError("list shorter than its declared length", path, line)
                    try:
                        lists[name].append(tuple(int(v) for v in vals))
                    except ValueError:
                        raise FormatError("non-integer list entry", path, line) from None
                    j += 1 + n
                else:
                    scalars[name].append(_float(tok[j], path, line))
                    j += 1
            if j != len(tok):
                raise FormatError(f"{len(tok) - j} unexpected trailing values", path, line)
        data = {k: np.array(v, dtype=np.float64) for k, v in scalars.items()}
        data.update(lists)
        out[el.name] = data
    for rest in range(pos, len(body)):
        if body[rest].strip():
            raise FormatError("data beyond the declared element counts", path, lineno + rest + 1)
    return out


def _vertex_block(data, path):
    v = data.get("vertex")
    if v is None:
        raise FormatError("no 'vertex' element", path)
    for c in ("x", "y", "z"):
        if c not in v:
            raise FormatError(f"vertex element lacks property {c!r}", path)
    return v


def read_point_cloud(path) -> PointCloud:
    data = read_ply(path)
    v = _vertex_block(data, path)
    pts = np.column_stack([v["x"], v["y"], v["z"]]) if len(v["x"]) else np.zeros((0, 3))
    normals = None
    if all(c in v for c in ("nx", "ny", "nz")) and len(v["x"]):
        normals = np.column_stack([v["nx"], v["ny"], v["nz"]])
        length = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(length == 0):
            raise FormatError("zero-length normal", path)
        # ASCII round-off: renormalise
        normals = normals / length
    frames = v.get("source_frame")
    confidence = v.get("confidence")
    try:
        return PointCloud(pts, normals, frames if frames is not None and len(pts) else None,
                          confidence if confidence is not None and len(pts) else None)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def read_mesh(path) -> TriangleMesh:
    data = read_ply(path)
    v = _vertex_block(data, path)
    verts = np.column_stack([v["x"], v["y"], v["z"]]) if len(v["x"]) else np.zeros((0, 3))
    tris: list[tuple[int, int, int]] = []
    face = data.get("face", {})
    polys = face.get("vertex_indices", face.get("vertex_index", []))
    for poly in polys:
        # fan triangulation for polygons
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    try:
        return TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def write_ply(path, vertices, faces=None, normals=None, extra: dict | None = None) -> None:
    """Write an ASCII PLY. ``extra`` maps property names to per-vertex arrays."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    cols = [vertices]
    header = ["ply", "format ascii 1.0", "comment units mm", f"element vertex {len(vertices)}",
              "property double x", "property double y", "property double z"]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float64).reshape(-1, 3))
        header += ["property double nx", "property double ny", "property double nz"]
    int_cols = set()
    for name, arr in (extra or {}).items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iu":
            header.append(f"property int {name}")
            int_cols.add(sum(c.shape[1] for c in cols))
        else:
            header.append(f"property double {name}")
        cols.append(arr.reshape(-1, 1).astype(np.float64))
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    table = np.hstack(cols) if cols else np.zeros((0, 0))
    lines = header
    for row in table:
        lines.append(" ".join(str(int(x)) if j in int_cols else _fmt(x) for j, x in enumerate(row)))
    if faces is not None:
        lines.extend(f"3 {a} {b} {c}" for a, b, c in faces)
    Path(path).write_text("\n".join(lines) + "\n")


def write_point_cloud(path, cloud: PointCloud) -> None:
    extra = {}
    if cloud.source_frame is not None:
        extra["source_frame"] = cloud.source_frame
    if cloud.confidence is not None:
        extra["confidence"] = cloud.confidence
    write_ply(path, cloud.points, normals=cloud.normals, extra=extra)


def write_mesh(path, mesh: TriangleMesh, vertex_scalars: dict | None = None) -> None:
    write_ply(path, mesh.vertices, faces=mesh.triangles, extra=vertex_scalars)


# ---------------------------------------------------------------------------
# Trajectory CSV


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].replace(" ", "") != TRAJECTORY_HEADER:
        raise FormatError(f"header must be '{TRAJECTORY_HEADER}'", path, 1)
    ids, ts, qs = [], [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        tok = [t.strip() for t in raw.split(",")]
        if len(tok) != 8:
            raise FormatError(f"expected 8 fields, got {len(tok)}", path, lineno)
        try:
            frame = int(tok[0])
        except ValueError:
            raise FormatError(f"frame id {tok[0]!r} is not an integer", path, lineno) from None
        if frame < 0:
            raise FormatError("negative frame id", path, lineno)
        if ids and frame <= ids[-1]:
            raise FormatError("frame ids must be strictly increasing", path, lineno)
        vals = [_float(t, path, lineno) for t in tok[1:]]
        q = np.array(vals[3:])
        qn = np.linalg.norm(q)
        if abs(qn - 1.0) > 1e-3:
            raise FormatError(f"quaternion norm {qn} is not 1", path, lineno)
        ids.append(frame)
        ts.append(vals[:3])
        qs.append(q / qn)
    return Trajectory(np.array(ids, dtype=np.int64), np.array(qs).reshape(-1, 4), np.array(ts).reshape(-1, 3))


def write_trajectory(path, traj: Trajectory) -> None:
    rows = [TRAJECTORY_HEADER]
    for f, t, q in zip(traj.frame_ids, traj.translations, traj.rotations):
        rows.append(",".join([str(int(f))] + [_fmt(x) for x in t] + [_fmt(x) for x in q]))
    Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Intrinsics / depth maps


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path, exc.lineno) from None
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(d)
    if missing:
        raise FormatError(f"intrinsics lack keys {sorted(missing)}", path)
    try:
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2) + "\n")


def quantize_depth(depth_mm: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(depth_mm, dtype=np.float64) * DEPTH_UNITS_PER_MM)
    return np.clip(q, 0, 65535).astype(np.uint16)


def write_pgm16(path, depth_mm: np.ndarray) -> None:
    """Binary 16-bit PGM (big-endian samples), 0.1 mm per unit, saturating."""
    q = quantize_depth(depth_mm)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end].decode("ascii"))
        pos = end
    if parts[0] != "P5":
        raise FormatError("not a binary PGM", path, 1)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(np.uint16)


def write_depth_raw(path, depth_mm: np.ndarray) -> None:
    """Raw little-endian float32, row-major, no header (dimensions go in the report)."""
    np.asarray(depth_mm, dtype="<f4").tofile(path)


def read_depth_raw(path, width: int, height: int) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(height, width).astype(np.float64)
