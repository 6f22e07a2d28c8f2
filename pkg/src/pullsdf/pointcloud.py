"""Point-cloud ingestion, normalization, exact nearest neighbours and query sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloudError",
    "MissingFileError",
    "MalformedFileError",
    "EmptyCloudError",
    "DegenerateCloudError",
    "PointCloud",
    "NormalizeTransform",
    "NearestNeighborIndex",
    "QueryBatch",
    "load",
    "save_xyz",
    "normalize",
    "local_sigma",
    "sample_queries",
    "nearest",
    "add_noise",
]

NORMALIZED_EXTENT = 0.9


class PointCloudError(Exception):
    pass


class MissingFileError(PointCloudError, FileNotFoundError):
    pass


class MalformedFileError(PointCloudError, ValueError):
    pass


class EmptyCloudError(PointCloudError, ValueError):
    pass


class DegenerateCloudError(PointCloudError, ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    source_path: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError("zero points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise MalformedFileError("normals and points differ in count")
            length = np.linalg.norm(self.normals, axis=1, keepdims=True)
            if not np.all(length > 0):
                raise MalformedFileError("zero-length normal")
            if np.any(np.abs(length - 1.0) > 1e-6):
                self.normals = self.normals / length

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class NormalizeTransform:
    """``normalized = (original - translation) * scale``."""

    translation: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.translation) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.translation

    @classmethod
    def identity(cls) -> "NormalizeTransform":
        return cls(np.zeros(3), 1.0)


# -- loading ----------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_xyz(path: str) -> PointCloud:
    rows, normals = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise MalformedFileError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
            if len(vals) not in (3, 6):
                raise MalformedFileError(f"{path}:{lineno}: expected 3 or 6 values, got {len(vals)}")
            rows.append(vals[:3])
            normals.append(vals[3:] if len(vals) == 6 else None)
    if not rows:
        raise EmptyCloudError(f"{path}: zero points")
    n = np.array(normals, dtype=np.float64) if all(v is not None for v in normals) else None
    return PointCloud(np.array(rows), n, path)


def _parse_obj(path: str) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.startswith("v "):
                continue
            parts = line.split()[1:4]
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise MalformedFileError(f"{path}:{lineno}: bad vertex record") from None
            if len(rows[-1]) != 3:
                raise MalformedFileError(f"{path}:{lineno}: vertex needs 3 coordinates")
    if not rows:
        raise EmptyCloudError(f"{path}: zero points")
    return PointCloud(np.array(rows), None, path)


def read_ply(path: str) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Vertex properties (by name) and face index lists, if any, from a PLY file."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MalformedFileError(f"{path}: missing 'ply' magic")
        fmt = None
        elements: list[list] = []
        while True:
            raw = fh.readline()
            if not raw:
                raise MalformedFileError(f"{path}: header not terminated")
            tokens = raw.decode("ascii", "replace").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append([tokens[1], int(tokens[2]), []])
            elif tokens[0] == "property":
                if not elements:
                    raise MalformedFileError(f"{path}: property before element")
                if tokens[1] == "list":
                    elements[-1][2].append((tokens[4], "list", tokens[2], tokens[3]))
                else:
                    if tokens[1] not in _PLY_TYPES:
                        raise MalformedFileError(f"{path}: unknown property type {tokens[1]}")
                    elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise MalformedFileError(f"{path}: unsupported PLY format {fmt!r}")
        body = fh.read()

    vertex, faces = None, None
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if any(p[1] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[1] == "list":
                            n = int(tokens[pos])
                            row.append([int(t) for t in tokens[pos + 1 : pos + 1 + n]])
                            pos += 1 + n
                        else:
                            pos += 1
                    rows.append(row[0])
                if name == "face":
                    faces = rows
            else:
                width = len(props)
                chunk = tokens[pos : pos + count * width]
                if len(chunk) != count * width:
                    raise MalformedFileError(f"{path}: truncated {name} data")
                try:
                    data = np.array(chunk, dtype=np.float64).reshape(count, width)
                except ValueError:
                    raise MalformedFileError(f"{path}: non-numeric {name} data") from None
                pos += count * width
                if name == "vertex":
                    vertex = {p[0]: data[:, i] for i, p in enumerate(props)}
    else:
        offset = 0
        for name, count, props in elements:
            if any(p[1] == "list" for p in props):
                rows = []
                for _ in range(count):
                    for p in props:
                        if p[1] == "list":
                            ct = np.dtype("<" + _PLY_TYPES[p[2]])
                            it = np.dtype("<" + _PLY_TYPES[p[3]])
                            n = int(np.frombuffer(body, ct, 1, offset)[0])
                            offset += ct.itemsize
                            rows.append(np.frombuffer(body, it, n, offset).astype(np.int64).tolist())
                            offset += n * it.itemsize
                        else:
                            offset += np.dtype(p[1]).itemsize
                if name == "face":
                    faces = rows
            else:
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                if offset + dt.itemsize * count > len(body):
                    raise MalformedFileError(f"{path}: truncated {name} data")
                data = np.frombuffer(body, dt, count, offset)
                offset += dt.itemsize * count
                if name == "vertex":
                    vertex = {p[0]: data[p[0]].astype(np.float64) for p in props}
    if vertex is None:
        raise MalformedFileError(f"{path}: no vertex element")
    face_arr = None
    if faces:
        tris = []
        for f in faces:
            tris.extend([f[0], f[k], f[k + 1]] for k in range(1, len(f) - 1))
        face_arr = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return vertex, face_arr


def _parse_ply(path: str) -> PointCloud:
    vertex, _ = read_ply(path)
    if not all(k in vertex for k in "xyz"):
        raise MalformedFileError(f"{path}: vertex element lacks x/y/z")
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1)
    if len(pts) == 0:
        raise EmptyCloudError(f"{path}: zero points")
    normals = None
    if all(k in vertex for k in ("nx", "ny", "nz")):
        normals = np.stack([vertex["nx"], vertex["ny"], vertex["nz"]], axis=1)
    return PointCloud(pts, normals, path)


_LOADERS = {"xyz": _parse_xyz, "ply": _parse_ply, "obj": _parse_obj, "obj-vertices": _parse_obj}


def load(path: str, fmt: str | None = None) -> PointCloud:
    """Read a cloud; ``fmt`` defaults to the file extension."""
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt in ("txt", "pts"):
        fmt = "xyz"
    if fmt not in _LOADERS:
        raise MalformedFileError(f"{path}: unsupported point format {fmt!r}")
    return _LOADERS[fmt](path)


def save_xyz(pc: PointCloud, path: str) -> None:
    data = pc.points if pc.normals is None else np.hstack([pc.points, pc.normals])
    np.savetxt(path, data, fmt="%.17g")


# -- geometry ---------------------------------------------------------------


def normalize(pc: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Centre on the centroid and scale the largest absolute coordinate to 0.9."""
    center = pc.points.mean(axis=0)
    extent = np.max(np.abs(pc.points - center))
    if not extent > 0:
        raise DegenerateCloudError("all points coincide; cannot normalize")
    tf = NormalizeTransform(center, NORMALIZED_EXTENT / extent)
    return replace(pc, points=tf.apply(pc.points)), tf


class NearestNeighborIndex:
    """Exact nearest neighbours over a fixed point set.

    Backed by a balanced (median-split) KD-tree. Equidistant candidates are
    resolved to the lowest point index.
    """

    def __init__(self, pts: np.ndarray):
        self.points = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError("cannot index zero points")
        self.tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the ``k`` nearest points, ascending."""
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        extra = min(k + 3, len(self.points))
        dist, idx = self.tree.query(q, k=extra)
        dist = dist.reshape(len(q), extra)
        idx = idx.reshape(len(q), extra)
        # recompute distances exactly and order by (distance, index)
        dist = np.sqrt(np.sum((self.points[idx] - q[:, None, :]) ** 2, axis=-1))
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, -1)
        idx = np.take_along_axis(idx, order, -1)
        # a tie at the cut-off may hide a lower index outside the candidates
        if extra < len(self.points):
            hit = np.nonzero(dist[:, k - 1] == dist[:, -1])[0]
            for r in hit:
                dist[r, :k], idx[r, :k] = self._exhaustive(q[r], k)
        return dist[:, :k], idx[:, :k]

    def _exhaustive(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        d = np.sqrt(np.sum((self.points - q) ** 2, axis=-1))
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return d[order], order

    def nearest(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest points, their distances and indices for each row of ``q``."""
        dist, idx = self.query(q, 1)
        return self.points[idx[:, 0]], dist[:, 0], idx[:, 0]


def nearest(index: NearestNeighborIndex, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pt, dist, _ = index.nearest(q)
    return pt, dist


def local_sigma(index: NearestNeighborIndex, pc: PointCloud, k: int = 50) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour, excluding itself."""
    n = len(pc.points)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    dist, idx = index.query(pc.points, k + 1)
    # drop the self match; with duplicates the self index may not come first
    self_col = idx == np.arange(n)[:, None]
    keep = ~self_col
    keep[~self_col.any(axis=1), -1] = False
    return dist[keep].reshape(n, k)[:, k - 1]


@dataclass
class QueryBatch:
    queries: np.ndarray
    seed_index: np.ndarray
    sigma: np.ndarray
    per_point: int = 40
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.queries)


def sample_queries(
    pc: PointCloud,
    index: NearestNeighborIndex | None = None,
    per_point: int = 40,
    k: int = 50,
    seed: int = 0,
    frame: np.ndarray | None = None,
) -> QueryBatch:
    """Isotropic Gaussian queries around every surface point.

    Queries are grouped by draw round: rows ``j*N .. (j+1)*N`` hold the j-th
    draw for every surface point. ``frame`` rotates the standard-normal draw
    stream (used to check rotation equivariance).
    """
    if index is None:
        index = NearestNeighborIndex(pc.points)
    k = min(k, len(pc.points) - 1)
    sigma = local_sigma(index, pc, k)
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise DegenerateCloudError("local spread is zero for some points (duplicate points?)")
    rng = np.random.default_rng(seed)
    n = len(pc.points)
    noise = rng.standard_normal((per_point, n, 3))
    if frame is not None:
        noise = noise @ np.asarray(frame, dtype=np.float64).T
    q = pc.points[None] + noise * sigma[None, :, None]
    seed_index = np.tile(np.arange(n), per_point)
    return QueryBatch(q.reshape(-1, 3), seed_index, sigma, per_point, seed)


def add_noise(pc: PointCloud, sigma_noise: float, seed: int = 0) -> PointCloud:
    if sigma_noise < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma_noise == 0:
        return replace(pc, points=pc.points.copy())
    rng = np.random.default_rng(seed)
    return replace(pc, points=pc.points + rng.normal(0.0, sigma_noise, pc.points.shape))
