import numpy as np
import pytest

# one (criterion, verdict, detail) line per acceptance check, echoed at the end of the run
ACCEPTANCE: list[str] = []


def record_criterion(number, passed, detail: str, verdict: str | None = None) -> None:
    verdict = verdict or ("PASS" if passed else "FAIL")
    line = f"criterion {number:>2}: {verdict}  {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def torus_points(n: int, major: float = 0.7, minor: float = 0.25, seed: int = 1) -> np.ndarray:
    """Area-uniform torus samples (rejection on the tube angle)."""
    rng = np.random.default_rng(seed)
    out = []
    while sum(len(o) for o in out) < n:
        u, v, w = rng.uniform(0, 2 * np.pi, (3, 2 * n))
        keep = w / (2 * np.pi) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        r = major + minor * np.cos(v)
        out.append(np.stack([r * np.cos(u), r * np.sin(u), minor * np.sin(v)], axis=1))
    return np.concatenate(out)[:n]


def torus_normals(p: np.ndarray, major: float = 0.7) -> np.ndarray:
    ring = p.copy()
    ring[:, 2] = 0
    ring = major * ring / np.linalg.norm(ring, axis=1, keepdims=True)
    n = p - ring
    return n / np.linalg.norm(n, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere_cloud():
    from pullsdf.pointcloud import PointCloud

    p = fibonacci_sphere(2000)
    return PointCloud(p, p.copy())


def brute_directional(a: np.ndarray, b: np.ndarray, chunk: int = 256):
    """O(N^2) nearest neighbours of ``a`` in ``b``; ties go to the lowest index."""
    dist = np.empty(len(a))
    idx = np.empty(len(a), dtype=np.int64)
    for s in range(0, len(a), chunk):
        d = np.sqrt(((a[s : s + chunk, None, :] - b[None]) ** 2).sum(-1))
        j = np.argmin(d, axis=1)  # argmin returns the first minimum
        idx[s : s + chunk] = j
        dist[s : s + chunk] = d[np.arange(len(j)), j]
    return dist, idx


def brute_metrics(a, na, b, nb, taus):
    dab, iab = brute_directional(a, b)
    dba, iba = brute_directional(b, a)
    cd_l1 = 0.5 * (dab.mean() + dba.mean())
    cd_l2 = 0.5 * ((dab**2).mean() + (dba**2).mean())
    nc = 0.5 * (np.abs((na * nb[iab]).sum(1)).mean() + np.abs((nb * na[iba]).sum(1)).mean())
    fs = {}
    for t in taus:
        p, r = np.mean(dab <= t), np.mean(dba <= t)
        fs[t] = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return dict(iab=iab, iba=iba, cd_l1=cd_l1, cd_l2=cd_l2, nc=nc, fscore=fs)
