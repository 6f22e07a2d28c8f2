"""Zero-level-set extraction on a dense grid and mesh utilities.

Surfaces are extracted with table-driven marching cubes. Vertices live on
grid edges and are shared between neighbouring cells, so a closed level set
gives a closed, manifold mesh. Faces are wound so that their right-hand
normals point towards increasing field values (outwards for a field that is
negative inside).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_table import CORNERS, EDGES, TRIANGLES
from .pointcloud import MalformedFileError, MissingFileError, NormalizeTransform, read_ply

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_TRIANGLES = np.array(TRIANGLES, dtype=np.int64)
# axis and start corner of each cell edge
_EDGE_AXIS = np.argmax(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]], axis=1)
_EDGE_START = _CORNERS[_EDGES[:, 0]]


class MeshingError(RuntimeError):
    pass


@dataclass
class ScalarGrid:
    """Field samples ``values[i, j, k]`` at ``(xs[i], ys[j], zs[k])``."""

    values: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    zs: np.ndarray

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([self.xs[1] - self.xs[0], self.ys[1] - self.ys[0], self.zs[1] - self.zs[0]])

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def _cross(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        n = self._cross()
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def edges(self) -> np.ndarray:
        """Undirected unique edges, sorted per row."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces).size
        return int(used - len(self.edges()) + self.n_faces)

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two faces with opposite orientation."""
        if self.n_faces == 0:
            return False
        directed = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        key = np.sort(directed, axis=1)
        _, counts = np.unique(key, axis=0, return_counts=True)
        if np.any(counts != 2):
            return False
        return len(np.unique(directed, axis=0)) == len(directed)

    def transformed(self, fn) -> "TriangleMesh":
        return TriangleMesh(fn(self.vertices), self.faces.copy())


def grid_axes(resolution: int, bounds=(-1.0, 1.0)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if resolution < 2:
        raise ValueError("grid resolution must be >= 2")
    lo, hi = np.broadcast_to(np.asarray(bounds[0], float), 3), np.broadcast_to(np.asarray(bounds[1], float), 3)
    if np.any(hi <= lo):
        raise ValueError(f"empty grid bounds {bounds}")
    return tuple(np.linspace(lo[a], hi[a], resolution) for a in range(3))


def sample_grid(field, resolution: int = 128, bounds=(-1.0, 1.0), level=None, chunk: int = 32768) -> ScalarGrid:
    """Evaluate ``field`` on a ``resolution**3`` grid.

    ``field`` is either a model with an ``sdf(points, level=...)`` method or a
    plain callable mapping (K, 3) points to K values.
    """
    xs, ys, zs = grid_axes(resolution, bounds)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    if hasattr(field, "sdf"):
        values = field.sdf(pts, level=level, chunk=chunk)
    else:
        values = np.concatenate([np.asarray(field(pts[i : i + chunk]), float).reshape(-1) for i in range(0, len(pts), chunk)])
    values = np.asarray(values, dtype=np.float64).reshape(resolution, resolution, resolution)
    bad = ~np.isfinite(values)
    if bad.any():
        first = pts[np.flatnonzero(bad.reshape(-1))[0]]
        raise MeshingError(f"non-finite field value at {first.tolist()}")
    return ScalarGrid(values, xs, ys, zs)


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set of ``grid``.

    A corner is inside when its value is strictly below ``iso``. Vertices that
    coincide exactly (level set through a grid point) are merged and faces
    that collapse are dropped.
    """
    v = grid.values
    nx, ny, nz = v.shape
    if min(v.shape) < 2:
        raise ValueError("grid must have at least two samples per axis")
    inside = v < iso
    cx, cy, cz = nx - 1, ny - 1, nz - 1
    case = np.zeros((cx, cy, cz), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx : dx + cx, dy : dy + cy, dz : dz + cz].astype(np.int64) << c
    cells = np.flatnonzero((case != 0) & (case != 255))
    if cells.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    ci, cj, ck = np.unravel_index(cells, (cx, cy, cz))
    tri = _TRIANGLES[case.reshape(-1)[cells]]  # (C, 16)
    cell_rep, slot = np.nonzero(tri >= 0)
    local = tri[cell_rep, slot]
    # global edge id: axis * N + flat index of the edge's start grid point
    start = np.stack([ci[cell_rep], cj[cell_rep], ck[cell_rep]], axis=1) + _EDGE_START[local]
    axis = _EDGE_AXIS[local]
    gid = axis * v.size + np.ravel_multi_index(start.T, v.shape)
    uniq, inverse = np.unique(gid, return_inverse=True)

    u_axis = uniq // v.size
    a = np.stack(np.unravel_index(uniq % v.size, v.shape), axis=1)
    b = a.copy()
    b[np.arange(len(b)), u_axis] += 1
    va = v[a[:, 0], a[:, 1], a[:, 2]]
    vb = v[b[:, 0], b[:, 1], b[:, 2]]
    t = np.clip((iso - va) / (vb - va), 0.0, 1.0)
    axes = (grid.xs, grid.ys, grid.zs)
    pa = np.stack([axes[d][a[:, d]] for d in range(3)], axis=1)
    pb = np.stack([axes[d][b[:, d]] for d in range(3)], axis=1)
    verts = pa + t[:, None] * (pb - pa)

    faces = inverse.reshape(-1, 3)[:, ::-1]
    verts, remap = np.unique(verts, axis=0, return_inverse=True)
    faces = remap.reshape(-1)[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    mesh = TriangleMesh(verts, faces[keep])
    mesh = TriangleMesh(mesh.vertices, mesh.faces[mesh.face_areas() > 0])
    return compact(mesh)


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop unreferenced vertices, keeping the vertex order."""
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[mesh.faces])


def extract_mesh(field, resolution: int = 128, bounds=(-1.0, 1.0), level=None, iso: float = 0.0) -> TriangleMesh:
    return marching_cubes(sample_grid(field, resolution, bounds, level), iso)


def denormalize(mesh: TriangleMesh, transform: NormalizeTransform) -> TriangleMesh:
    """Map a mesh from the normalized frame back to input coordinates."""
    return mesh.transformed(transform.invert)


def sample_surface(mesh: TriangleMesh, n: int = 10000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on the mesh with their face normals."""
    if mesh.n_faces == 0:
        raise MeshingError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cum = np.cumsum(areas)
    face = np.searchsorted(cum, rng.uniform(0.0, cum[-1], n), side="right")
    face = np.minimum(face, mesh.n_faces - 1)
    uv = rng.uniform(size=(n, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    pts = a + uv[:, :1] * (b - a) + uv[:, 1:] * (c - a)
    return pts, mesh.face_normals()[face]


def export(mesh: TriangleMesh, path, fmt: str | None = None) -> Path:
    """Write ``mesh`` as Wavefront OBJ (1-based indices) or ASCII PLY."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        with open(path, "w") as fh:
            fh.write(f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
            np.savetxt(fh, mesh.vertices, fmt="v %.9g %.9g %.9g")
            np.savetxt(fh, mesh.faces + 1, fmt="f %d %d %d")
    elif fmt == "ply":
        with open(path, "w") as fh:
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {mesh.n_vertices}\nproperty double x\nproperty double y\nproperty double z\n"
                f"element face {mesh.n_faces}\nproperty list uchar int vertex_indices\nend_header\n"
            )
            np.savetxt(fh, mesh.vertices, fmt="%.9g %.9g %.9g")
            np.savetxt(fh, np.column_stack([np.full(mesh.n_faces, 3), mesh.faces]), fmt="%d %d %d %d")
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")
    return path


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY triangle mesh (polygons are fan-triangulated)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    fmt = path.suffix.lstrip(".").lower()
    if fmt == "ply":
        vertex, faces = read_ply(path)
        verts = np.column_stack([vertex[k] for k in ("x", "y", "z")])
        return TriangleMesh(verts, faces if faces is not None else np.zeros((0, 3)))
    if fmt != "obj":
        raise MalformedFileError(f"{path}: unsupported mesh format {fmt!r}")
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except (ValueError, IndexError) as exc:
                raise MalformedFileError(f"{path}:{lineno}: {exc}") from None
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MalformedFileError(f"{path}: face index out of range")
    return TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), faces)
