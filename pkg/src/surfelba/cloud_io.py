"""Point cloud, trajectory and surfel-map file formats.

Supported inputs:

* clouds: ``kitti-bin`` (packed little-endian float32 ``x y z intensity``),
  ``ply`` (ascii or binary_little_endian, float x/y/z vertex properties),
  ``xyz-text`` (whitespace separated, first three columns used);
* trajectories: ``tum`` (``t tx ty tz qx qy qz qw``) and ``kitti-poses``
  (12 row-major floats of the 3x4 matrix, timestamp = row index).

Text output prints floats with 9 significant digits unless ``precision`` is
given.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, InputError, MalformedPoseError, OrderingError, UnsupportedFormatError
from .geometry import Pose

log = logging.getLogger(__name__)

CLOUD_FORMATS = ("kitti-bin", "ply", "xyz-text")
TRAJECTORY_FORMATS = ("tum", "kitti-poses")
QUAT_TOL = 1e-3
PRECISION = 9

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass
class Cloud:
    points: np.ndarray
    timestamp: float = 0.0
    scan_id: int = 0
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise InputError("a cloud needs at least one point")

    def __len__(self):
        return len(self.points)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise InputError("trajectory timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            bad = int(np.argmax(np.diff(self.timestamps) <= 0)) + 1
            raise OrderingError(f"timestamps not strictly increasing at row {bad}")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def _fmt(x, precision):
    return f"{float(x):.{precision}g}"


def _finite_cloud(points, path, **kwargs) -> Cloud:
    finite = np.all(np.isfinite(points), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.info("%s: dropped %d non-finite points", path, dropped)
    points = points[finite]
    if len(points) == 0:
        raise FormatError(f"{path}: no finite points")
    return Cloud(points, dropped=dropped, **kwargs)


def _read_kitti_bin(path):
    data = open(path, "rb").read()
    if len(data) == 0:
        raise FormatError(f"{path}: empty file")
    rem = len(data) % 16
    if rem:
        raise FormatError(
            f"{path}: truncated record at byte offset {len(data) - rem} "
            f"(file length {len(data)} is not a multiple of 16)"
        )
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)


def _read_xyz_text(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise FormatError(f"{path}:{lineno}: expected at least 3 columns")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: empty file")
    return np.array(rows, dtype=float)


def _parse_ply_header(f, path):
    magic = f.readline()
    if magic.strip() != b"ply":
        raise FormatError(f"{path}: missing ply magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype | ('list', count_t, item_t))])
    while True:
        line = f.readline()
        if not line:
            raise FormatError(f"{path}: header not terminated")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            if tokens[1] == "list":
                for t in tokens[2:4]:
                    if t not in _PLY_TYPES:
                        raise UnsupportedFormatError(f"{path}: unknown ply property type {t!r}")
                elements[-1][2].append((tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise UnsupportedFormatError(f"{path}: unknown ply property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormatError(f"{path}: unsupported ply format {fmt!r}")
    return fmt, elements


def read_ply_vertices(path) -> dict:
    """Return the ``vertex`` element of a ply file as ``{property: array}``."""
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f, path)
        body = f.read()
    if fmt == "ascii":
        lines = body.decode("ascii", "replace").splitlines()
        pos = 0
        for name, count, props in elements:
            rows = lines[pos:pos + count]
            if len(rows) < count:
                raise FormatError(f"{path}: element {name!r} truncated ({len(rows)} of {count} rows)")
            pos += count
            if name != "vertex":
                continue
            if any(isinstance(dt, tuple) for _, dt in props):
                raise UnsupportedFormatError(f"{path}: list properties on vertex element")
            if count == 0:
                return {p: np.zeros(0) for p, _ in props}
            try:
                table = np.array([r.split() for r in rows], dtype=float)
            except ValueError:
                raise FormatError(f"{path}: malformed vertex rows") from None
            if table.ndim != 2 or table.shape[1] != len(props):
                raise FormatError(f"{path}: vertex rows do not match {len(props)} properties")
            return {p: table[:, i] for i, (p, _) in enumerate(props)}
        raise FormatError(f"{path}: no vertex element")

    offset = 0
    for name, count, props in elements:
        if any(isinstance(dt, tuple) for _, dt in props):
            if name == "vertex":
                raise UnsupportedFormatError(f"{path}: list properties on vertex element")
            raise UnsupportedFormatError(f"{path}: binary list element {name!r} before vertex")
        dtype = np.dtype([(p, "<" + dt) for p, dt in props])
        need = dtype.itemsize * count
        if offset + need > len(body):
            raise FormatError(
                f"{path}: element {name!r} truncated at byte offset {len(body)}, needs {offset + need}"
            )
        if name == "vertex":
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            return {p: arr[p].astype(float) for p, _ in props}
        offset += need
    raise FormatError(f"{path}: no vertex element")


def _read_ply_points(path):
    v = read_ply_vertices(path)
    if not all(k in v for k in "xyz"):
        raise FormatError(f"{path}: vertex element lacks x/y/z")
    pts = np.column_stack([v["x"], v["y"], v["z"]])
    if len(pts) == 0:
        raise FormatError(f"{path}: ply has no vertices")
    return pts


def read_cloud(path, format="kitti-bin", timestamp=None, scan_id=0) -> Cloud:
    """Read one scan.  Without a supplied timestamp the scan index is used."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise InputError(f"cloud file not found: {path}")
    if format == "kitti-bin":
        pts = _read_kitti_bin(path)
    elif format == "ply":
        pts = _read_ply_points(path)
    elif format == "xyz-text":
        pts = _read_xyz_text(path)
    else:
        raise UnsupportedFormatError(f"unknown cloud format {format!r}; expected one of {CLOUD_FORMATS}")
    ts = float(scan_id) if timestamp is None else float(timestamp)
    return _finite_cloud(pts, path, timestamp=ts, scan_id=scan_id)


def write_cloud(points, path, format="ply", precision=PRECISION):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if format == "kitti-bin":
        rec = np.zeros((len(points), 4), dtype="<f4")
        rec[:, :3] = points
        with open(path, "wb") as f:
            f.write(rec.tobytes())
    elif format == "ply":
        _write_ascii_ply(path, ["x", "y", "z"], points, precision)
    elif format == "xyz-text":
        with open(path, "w") as f:
            for p in points:
                f.write(" ".join(_fmt(v, precision) for v in p) + "\n")
    else:
        raise UnsupportedFormatError(f"unknown cloud format {format!r}")


def _write_ascii_ply(path, props, table, precision):
    try:
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(table)}\n")
            for p in props:
                f.write(f"property float {p}\n")
            f.write("end_header\n")
            for row in table:
                f.write(" ".join(_fmt(v, precision) for v in row) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


def write_surfel_map(surfels, path, precision=PRECISION):
    """Write surfels as ascii ply vertices ``x y z nx ny nz radius``, in surfel-id order."""
    centers = np.asarray(surfels.centers, dtype=float).reshape(-1, 3)
    normals = np.asarray(surfels.normals, dtype=float).reshape(-1, 3)
    radii = np.asarray(surfels.radii, dtype=float).reshape(-1, 1)
    table = np.hstack([centers, normals, radii])
    _write_ascii_ply(path, ["x", "y", "z", "nx", "ny", "nz", "radius"], table, precision)


def read_surfel_map(path):
    """Read a surfel ply back as ``(centers, normals, radii)`` arrays."""
    v = read_ply_vertices(os.fspath(path))
    missing = [k for k in ("x", "y", "z", "nx", "ny", "nz", "radius") if k not in v]
    if missing:
        raise FormatError(f"{path}: surfel ply lacks {missing}")
    centers = np.column_stack([v["x"], v["y"], v["z"]]).reshape(-1, 3)
    normals = np.column_stack([v["nx"], v["ny"], v["nz"]]).reshape(-1, 3)
    return centers, normals, np.asarray(v["radius"], dtype=float)


def _rows(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise InputError(f"trajectory file not found: {path}")
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line.replace(",", " ").split()


def read_trajectory(path, format="tum") -> Trajectory:
    stamps, poses = [], []
    for lineno, cols in _rows(path):
        try:
            vals = [float(c) for c in cols]
        except ValueError:
            raise MalformedPoseError(f"{path}:{lineno}: non-numeric field") from None
        if format == "tum":
            if len(vals) != 8:
                raise MalformedPoseError(f"{path}:{lineno}: tum rows need 8 fields, got {len(vals)}")
            q = np.array(vals[4:8])
            qn = np.linalg.norm(q)
            if not np.isfinite(qn) or abs(qn - 1.0) > QUAT_TOL:
                raise MalformedPoseError(f"{path}:{lineno}: quaternion norm {qn:.6g} deviates from 1")
            R = Rotation.from_quat(q / qn).as_matrix()
            stamps.append(vals[0])
            poses.append(Pose(R, vals[1:4]))
        elif format == "kitti-poses":
            if len(vals) != 12:
                raise MalformedPoseError(f"{path}:{lineno}: kitti rows need 12 fields, got {len(vals)}")
            M = np.array(vals).reshape(3, 4)
            pose = Pose(M[:, :3], M[:, 3])
            if not pose.is_valid(tol=QUAT_TOL):
                raise MalformedPoseError(f"{path}:{lineno}: rotation block is not orthonormal")
            stamps.append(float(len(poses)))
            poses.append(pose)
        else:
            raise UnsupportedFormatError(f"unknown trajectory format {format!r}")
    if not poses:
        raise MalformedPoseError(f"{path}: no poses")
    return Trajectory(np.array(stamps), poses)


def write_trajectory(traj: Trajectory, path, format="tum", precision=PRECISION):
    with open(path, "w") as f:
        for ts, pose in zip(traj.timestamps, traj.poses):
            if format == "tum":
                qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
                vals = [ts, *pose.translation, qx, qy, qz, qw]
                # timestamps keep full precision so association stays monotone
                f.write(repr(float(vals[0])) + " " + " ".join(_fmt(v, precision) for v in vals[1:]) + "\n")
            elif format == "kitti-poses":
                M = np.hstack([pose.rotation, pose.translation[:, None]])
                f.write(" ".join(_fmt(v, precision) for v in M.ravel()) + "\n")
            else:
                raise UnsupportedFormatError(f"unknown trajectory format {format!r}")


def list_cloud_files(directory, format) -> list:
    ext = {"kitti-bin": ".bin", "ply": ".ply", "xyz-text": (".xyz", ".txt")}[format]
    names = sorted(n for n in os.listdir(directory) if n.endswith(ext))

    def key(n):
        m = re.search(r"\d+", n)
        return (int(m.group()) if m else -1, n)

    return [os.path.join(directory, n) for n in sorted(names, key=key)]
