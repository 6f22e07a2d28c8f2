"""Surface reconstruction metrics over point samples.

Conventions, stated once and embedded in every report:

* Chamfer: directional mean distances averaged (``avg``) or summed (``sum``).
* F-Score: a point counts as matched when its distance is <= tau.
* Normal consistency: absolute cosine, averaged over both directions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .meshing import TriangleMesh, sample_surface
from .pointcloud import EmptyCloudError, NearestNeighborIndex, PointCloud

CD_CONVENTIONS = ("avg", "sum")
DEFAULT_THRESHOLDS = (0.002, 0.004, 0.01)


def _points(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyCloudError(f"{name} has zero points")
    return x


def directional(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Distance from every point of ``a`` to its nearest point of ``b`` and that point's index."""
    a, b = _points(a, "first set"), _points(b, "second set")
    _, dist, idx = NearestNeighborIndex(b).nearest(a)
    return dist, idx


def _combine(x: float, y: float, convention: str) -> float:
    if convention not in CD_CONVENTIONS:
        raise ValueError(f"cd convention must be one of {CD_CONVENTIONS}")
    return x + y if convention == "sum" else 0.5 * (x + y)


def chamfer(a, b, convention: str = "avg") -> tuple[float, float]:
    """(cd_l1, cd_l2) between two point sets."""
    dab, _ = directional(a, b)
    dba, _ = directional(b, a)
    l1 = _combine(float(np.mean(dab)), float(np.mean(dba)), convention)
    l2 = _combine(float(np.mean(dab**2)), float(np.mean(dba**2)), convention)
    return l1, l2


def _fscore_from(d_rg: np.ndarray, d_gr: np.ndarray, tau: float) -> float:
    if tau <= 0:
        raise ValueError("threshold must be positive")
    p = float(np.mean(d_rg <= tau))
    r = float(np.mean(d_gr <= tau))
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def fscore(recon, gt, tau: float) -> float:
    d_rg, _ = directional(recon, gt)
    d_gr, _ = directional(gt, recon)
    return _fscore_from(d_rg, d_gr, tau)


def _unit(n, name: str) -> np.ndarray:
    if n is None:
        raise ValueError(f"{name} normals are missing")
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    length = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(length == 0):
        raise ValueError(f"{name} normals contain zero vectors")
    return n / length


def normal_consistency(a, na, b, nb) -> float:
    """Mean absolute cosine between normals of nearest-neighbour pairs, both ways."""
    a, b = _points(a, "first set"), _points(b, "second set")
    na, nb = _unit(na, "first"), _unit(nb, "second")
    if len(na) != len(a) or len(nb) != len(b):
        raise ValueError("normals and points differ in count")
    _, iab = directional(a, b)
    _, iba = directional(b, a)
    cab = np.abs(np.sum(na * nb[iab], axis=1))
    cba = np.abs(np.sum(nb * na[iba], axis=1))
    return float(np.clip(0.5 * (np.mean(cab) + np.mean(cba)), 0.0, 1.0))


def pca_normals(points, k: int = 18) -> np.ndarray:
    """Unoriented normals from least-squares plane fits to the k nearest neighbours."""
    points = _points(points, "cloud")
    k = min(k, len(points))
    if k < 3:
        raise ValueError("need at least three points for plane fits")
    _, idx = NearestNeighborIndex(points).query(points, k)
    nbrs = points[idx]
    centred = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


@dataclass
class MetricReport:
    cd_l1: float
    cd_l2: float
    cd_l2_x100: float
    nc: float
    fscore: dict[str, float]
    cd_l1_recon_to_gt: float
    cd_l1_gt_to_recon: float
    cd_l2_recon_to_gt: float
    cd_l2_gt_to_recon: float
    n_recon: int
    n_gt: int
    seed: int
    conventions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _surface(source, n: int, seed: int, pca_k: int, name: str):
    """Points, normals and the normals' origin for a mesh (area samples) or
    cloud (all points)."""
    if isinstance(source, TriangleMesh):
        if source.n_faces == 0:
            raise EmptyCloudError(f"{name} mesh has no faces")
        pts, normals = sample_surface(source, n, seed)
        return pts, normals, "face"
    if isinstance(source, PointCloud):
        pts, normals = source.points, source.normals
    else:
        pts, normals = np.asarray(source, dtype=np.float64), None
    pts = _points(pts, f"{name} cloud")
    if normals is None:
        return pts, pca_normals(pts, pca_k), f"pca k={pca_k}"
    return pts, normals, "given"


def evaluate_reconstruction(
    mesh: TriangleMesh,
    gt,
    n: int = 10000,
    thresholds=DEFAULT_THRESHOLDS,
    seed: int = 0,
    cd_convention: str = "avg",
    pca_k: int = 18,
) -> MetricReport:
    """Compare a reconstructed mesh with a ground-truth mesh or point cloud.

    Meshes are sampled with ``n`` area-weighted points drawn with ``seed``
    (so a mesh compared with itself scores exactly 0 / 1 / 1); clouds are used
    as given, with PCA normals when they carry none.
    """
    rp, rn, _ = _surface(mesh, n, seed, pca_k, "reconstructed")
    gp, gn, gt_normals = _surface(gt, n, seed, pca_k, "ground-truth")
    d_rg, i_rg = directional(rp, gp)
    d_gr, i_gr = directional(gp, rp)
    parts = [float(np.mean(d_rg)), float(np.mean(d_gr)), float(np.mean(d_rg**2)), float(np.mean(d_gr**2))]
    cd_l1 = _combine(parts[0], parts[1], cd_convention)
    cd_l2 = _combine(parts[2], parts[3], cd_convention)
    rn, gn = _unit(rn, "reconstructed"), _unit(gn, "ground-truth")
    nc = 0.5 * (np.mean(np.abs(np.sum(rn * gn[i_rg], axis=1))) + np.mean(np.abs(np.sum(gn * rn[i_gr], axis=1))))
    fs = {f"{t:g}": _fscore_from(d_rg, d_gr, float(t)) for t in thresholds}
    report = MetricReport(
        cd_l1=cd_l1,
        cd_l2=cd_l2,
        cd_l2_x100=100.0 * cd_l2,
        nc=float(np.clip(nc, 0.0, 1.0)),
        fscore=fs,
        cd_l1_recon_to_gt=parts[0],
        cd_l1_gt_to_recon=parts[1],
        cd_l2_recon_to_gt=parts[2],
        cd_l2_gt_to_recon=parts[3],
        n_recon=len(rp),
        n_gt=len(gp),
        seed=seed,
        conventions={
            "chamfer": cd_convention,
            "fscore": "distance <= tau",
            "nc": "absolute cosine, mean of both directions",
            "gt_normals": gt_normals,
        },
    )
    values = [report.cd_l1, report.cd_l2, report.nc, *fs.values()]
    if not all(np.isfinite(values)):
        raise ValueError("non-finite metric")
    return report
