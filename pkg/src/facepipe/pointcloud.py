"""Core 3D point-set type, PLY I/O, rigid transforms, and neighbor queries."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "RigidTransform",
    "NeighborIndex",
    "PlyParseError",
    "EmptyCropError",
    "load_ply",
    "save_ply",
    "apply_transform",
    "crop_sphere",
    "nearest",
    "rotation_zyx",
    "euler_angles_zyx",
]

# Orthonormality / unit-determinant tolerance for rotation matrices.
_ROTATION_TOL = 1e-6


class PlyParseError(ValueError):
    """Malformed PLY file; message carries the offending line or byte offset."""


class EmptyCropError(ValueError):
    """Spherical crop retained no points (typically a bad nose-tip estimate)."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("points contain NaN or Inf coordinates")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Unordered set of 3D points in millimeters, with optional named landmarks.

    Arrays are read-only after construction; operations return new clouds.
    """

    points: np.ndarray
    landmarks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = _as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        lms = {}
        for name, p in self.landmarks.items():
            p = np.asarray(p, dtype=np.float64).reshape(3)
            if not np.isfinite(p).all():
                raise ValueError(f"landmark {name!r} has non-finite coordinates")
            p.setflags(write=False)
            lms[name] = p
        object.__setattr__(self, "landmarks", lms)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3) plus translation (mm); maps p to rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > _ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rotation_zyx(theta_x: float, theta_y: float, theta_z: float,
                 degrees: bool = True) -> np.ndarray:
    """Rotation matrix Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x).

    Right-handed, y-up convention shared by the whole pipeline.
    """
    if degrees:
        theta_x, theta_y, theta_z = np.deg2rad([theta_x, theta_y, theta_z])
    cx, sx = np.cos(theta_x), np.sin(theta_x)
    cy, sy = np.cos(theta_y), np.sin(theta_y)
    cz, sz = np.cos(theta_z), np.sin(theta_z)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_angles_zyx(rotation: np.ndarray, degrees: bool = True) -> np.ndarray:
    """Angles (theta_x, theta_y, theta_z) such that rotation_zyx reproduces the matrix.

    Valid away from the gimbal-lock pitch of +/-90 degrees.
    """
    r = np.asarray(rotation, dtype=np.float64)
    theta_y = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    theta_x = np.arctan2(r[2, 1], r[2, 2])
    theta_z = np.arctan2(r[1, 0], r[0, 0])
    out = np.array([theta_x, theta_y, theta_z])
    return np.rad2deg(out) if degrees else out


class NeighborIndex:
    """Read-only nearest-neighbor index over a fixed point list.

    Exact ties are broken toward the lowest point index, matching a
    linear argmin scan over squared distances.
    """

    def __init__(self, points: np.ndarray):
        self._points = _as_points(points)
        if len(self._points) == 0:
            raise ValueError("cannot index an empty point list")
        self._tree = cKDTree(self._points)
        self._resolution = None

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def sampling_resolution(self) -> float:
        """Median distance from each stored point to its nearest other point."""
        if self._resolution is None:
            if len(self._points) < 2:
                self._resolution = 0.0
            else:
                dist, _ = self._tree.query(self._points, k=2)
                self._resolution = float(np.median(dist[:, 1]))
        return self._resolution

    def query(self, p) -> int:
        """Index of the closest stored point to p (lowest index on ties)."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        dist, idx = self._tree.query(p)
        if dist == 0.0:
            candidates = self._tree.query_ball_point(p, 0.0)
        else:
            # Inflate slightly so kd-tree rounding cannot exclude a tied point.
            candidates = self._tree.query_ball_point(p, dist * (1.0 + 1e-9))
        candidates = np.sort(np.asarray(candidates, dtype=np.intp))
        sq = np.sum((self._points[candidates] - p) ** 2, axis=1)
        return int(candidates[np.argmin(sq)])

    def query_many(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized nearest query; returns (distances, indices).

        Applies the same lowest-index tie rule as query().
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(2, len(self._points))
        dist, idx = self._tree.query(pts, k=k)
        if k == 1:
            return dist.reshape(-1), idx.reshape(-1).astype(np.intp)
        best_d, best_i = dist[:, 0].copy(), idx[:, 0].astype(np.intp)
        tied = dist[:, 0] == dist[:, 1]
        for row in np.nonzero(tied)[0]:
            best_i[row] = self.query(pts[row])
        return best_d, best_i


def nearest(index: NeighborIndex, p) -> int:
    """Argmin over squared Euclidean distance; ties go to the lowest index."""
    return index.query(p)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Rigidly move every point and landmark: p -> R @ p + t."""
    return PointCloud(
        transform.apply(cloud.points),
        {name: transform.apply(p.reshape(1, 3))[0] for name, p in cloud.landmarks.items()},
    )


def crop_sphere(cloud: PointCloud, center, radius: float) -> PointCloud:
    """Keep points with ||p - center|| <= radius (boundary inclusive), order preserved."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    keep = np.linalg.norm(cloud.points - center, axis=1) <= radius
    if not keep.any():
        raise EmptyCropError(
            f"no points within {radius} mm of {center.tolist()}; "
            "check the nose-tip estimate"
        )
    return PointCloud(cloud.points[keep], dict(cloud.landmarks))


# ---------------------------------------------------------------------------
# PLY I/O. ASCII and binary_little_endian, vertex x/y/z properties required;
# unknown vertex properties are ignored. Landmarks travel in a JSON sidecar
# ("<stem>.landmarks.json") so the PLY itself stays standard.
# ---------------------------------------------------------------------------

_PLY_SCALAR_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_STRUCT_CODES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _landmark_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".landmarks.json")


def load_ply(path) -> PointCloud:
    """Read an ASCII or binary_little_endian PLY with float x,y,z vertex properties."""
    path = Path(path)
    raw = path.read_bytes()

    # --- header ---
    lines = []
    offset = 0
    line_no = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise PlyParseError(f"{path}: header not terminated (line {line_no + 1})")
        line = raw[offset:end].rstrip(b"\r").decode("ascii", errors="replace")
        offset = end + 1
        line_no += 1
        lines.append(line)
        if line == "end_header":
            break
        if line_no > 500:
            raise PlyParseError(f"{path}: runaway header (line {line_no})")
    if not lines or lines[0] != "ply":
        raise PlyParseError(f"{path}: missing 'ply' magic (line 1)")

    fmt = None
    elements = []  # (name, count, [(prop_type, prop_name) or ("list", ...)])
    for i, line in enumerate(lines[1:-1], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"{path}: unsupported format {line!r} (line {i})")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError(f"{path}: bad element declaration {line!r} (line {i})")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}: property before any element (line {i})")
            if tok[1] == "list":
                elements[-1][2].append(("list",) + tuple(tok[2:]))
            elif len(tok) == 3 and tok[1] in _PLY_SCALAR_SIZES:
                elements[-1][2].append((tok[1], tok[2]))
            else:
                raise PlyParseError(f"{path}: bad property {line!r} (line {i})")
    if fmt is None:
        raise PlyParseError(f"{path}: header has no format line")

    vert_pos = next((k for k, e in enumerate(elements) if e[0] == "vertex"), None)
    if vert_pos is None:
        raise PlyParseError(f"{path}: no vertex element in header")
    _, n_vertices, props = elements[vert_pos]
    if n_vertices == 0:
        raise PlyParseError(f"{path}: vertex element declares zero vertices")
    prop_names = [p[1] if p[0] != "list" else None for p in props]
    try:
        xyz_cols = [prop_names.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise PlyParseError(f"{path}: vertex element lacks x/y/z properties") from None

    if fmt == "ascii":
        body = raw[offset:].decode("ascii", errors="replace").splitlines()
        # one line per entry; skip elements declared before vertex
        skip = sum(e[1] for e in elements[:vert_pos])
        data_lines = [l for l in body if l.strip()]
        if len(data_lines) < skip + n_vertices:
            bad_line = line_no + len(data_lines) + 1
            raise PlyParseError(
                f"{path}: truncated body, expected {skip + n_vertices} data lines, "
                f"got {len(data_lines)} (line {bad_line})"
            )
        # Materialize each coordinate at its declared width so that a
        # "property float" column holds exact float32 values in memory.
        narrow = [props[c][0] in ("float", "float32") for c in xyz_cols]
        pts = np.empty((n_vertices, 3), dtype=np.float64)
        for r in range(n_vertices):
            tok = data_lines[skip + r].split()
            if len(tok) < len(props):
                raise PlyParseError(
                    f"{path}: vertex row has {len(tok)} values, expected "
                    f"{len(props)} (line {line_no + skip + r + 1})"
                )
            try:
                pts[r] = [
                    np.float32(float(tok[c])) if nar else float(tok[c])
                    for c, nar in zip(xyz_cols, narrow)
                ]
            except ValueError:
                raise PlyParseError(
                    f"{path}: non-numeric coordinate (line {line_no + skip + r + 1})"
                ) from None
    else:
        if vert_pos != 0:
            raise PlyParseError(
                f"{path}: binary files must declare the vertex element first"
            )
        if any(p[0] == "list" for p in props):
            raise PlyParseError(f"{path}: list properties on vertices are unsupported")
        stride = sum(_PLY_SCALAR_SIZES[p[0]] for p in props)
        need = stride * n_vertices
        if len(raw) - offset < need:
            raise PlyParseError(
                f"{path}: truncated body, need {need} bytes of vertex data, "
                f"have {len(raw) - offset} (byte {offset})"
            )
        rec = struct.Struct("<" + "".join(_PLY_STRUCT_CODES[p[0]] for p in props))
        pts = np.empty((n_vertices, 3), dtype=np.float64)
        for r in range(n_vertices):
            row = rec.unpack_from(raw, offset + r * stride)
            pts[r] = [row[c] for c in xyz_cols]

    landmarks = {}
    sidecar = _landmark_sidecar(path)
    if sidecar.exists():
        landmarks = {k: np.asarray(v, dtype=np.float64)
                     for k, v in json.loads(sidecar.read_text()).items()}
    return PointCloud(pts, landmarks)


def _format_f32(value: float) -> str:
    # Shortest decimal that round-trips the float32 value exactly.
    return np.format_float_positional(np.float32(value), unique=True, trim="0")


def save_ply(cloud: PointCloud, path) -> None:
    """Write an ASCII PLY (float32 x,y,z) plus a landmark sidecar when present."""
    path = Path(path)
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in cloud.points:
        out.append(f"{_format_f32(p[0])} {_format_f32(p[1])} {_format_f32(p[2])}")
    path.write_text("\n".join(out) + "\n")
    if cloud.landmarks:
        payload = {k: [float(x) for x in v] for k, v in sorted(cloud.landmarks.items())}
        _landmark_sidecar(path).write_text(json.dumps(payload, sort_keys=True, indent=1))
