"""Surface comparison metrics: Chamfer distance and normal consistency.

Both use exact nearest neighbors (kd-tree accelerated, with a brute-force
backend kept as the independent slow path).  Chamfer is the sum of the two
directional mean closest-point distances, unsquared by default; normal
consistency is the two-directional average cosine similarity at mutually
nearest points, signed by default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, PointCloud, TriangleMesh, sample_surface

Array = np.ndarray


class NNIndex:
    """Exact nearest neighbor queries; ties resolved to the lowest index."""

    def __init__(self, points: Array):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise GeometryError("nearest-neighbor index needs a nonempty (n, 3) set")
        self._tree = cKDTree(self.points)

    def query(self, queries: Array) -> tuple[Array, Array]:
        queries = np.asarray(queries, dtype=np.float64)
        k = min(2, self.points.shape[0])
        dist, idx = self._tree.query(queries, k=k)
        if k == 1:
            return dist.reshape(-1), np.zeros(queries.shape[0], dtype=np.int64)
        best_d, best_i = dist[:, 0], idx[:, 0].astype(np.int64)
        # exact tie at the top: rescan those rows for the lowest index
        ties = np.flatnonzero(dist[:, 1] == best_d)
        for row in ties:
            d_all = np.linalg.norm(self.points - queries[row], axis=1)
            m = d_all.min()
            best_i[row] = int(np.flatnonzero(d_all == m)[0])
            best_d[row] = m
        return best_d, best_i


def _nn_brute(queries: Array, points: Array) -> tuple[Array, Array]:
    """Chunked O(n^2) scan; the reference backend."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    dist = np.empty(queries.shape[0])
    idx = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], 512):
        block = queries[start:start + 512]
        d = np.linalg.norm(block[:, None, :] - points[None, :, :], axis=2)
        idx[start:start + 512] = np.argmin(d, axis=1)  # first min = lowest index
        dist[start:start + 512] = d[np.arange(len(block)), idx[start:start + 512]]
    return dist, idx


def _directional(queries: Array, points: Array, backend: str) -> tuple[Array, Array]:
    if backend == "kdtree":
        return NNIndex(points).query(queries)
    if backend == "brute":
        return _nn_brute(queries, points)
    raise ValueError(f"unknown backend {backend!r}")


def chamfer(a: Array, b: Array, squared: bool = False, backend: str = "kdtree") -> float:
    """mean_a min_b d(a, b) + mean_b min_a d(b, a)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise GeometryError("chamfer distance needs nonempty point sets")
    d_ab, _ = _directional(a, b, backend)
    d_ba, _ = _directional(b, a, backend)
    if squared:
        d_ab, d_ba = d_ab ** 2, d_ba ** 2
    return float(np.mean(d_ab) + np.mean(d_ba))


def normal_consistency(a: Array, normals_a: Array, b: Array, normals_b: Array,
                       absolute: bool = False, backend: str = "kdtree") -> float:
    """Average cosine similarity between normals at closest points, both ways."""
    if normals_a is None or normals_b is None:
        raise GeometryError("normal consistency needs normals on both sets")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise GeometryError("normal consistency needs nonempty point sets")
    _, i_ab = _directional(a, b, backend)
    _, i_ba = _directional(b, a, backend)
    cos_ab = np.einsum("ij,ij->i", normals_a, np.asarray(normals_b)[i_ab])
    cos_ba = np.einsum("ij,ij->i", normals_b, np.asarray(normals_a)[i_ba])
    if absolute:
        cos_ab, cos_ba = np.abs(cos_ab), np.abs(cos_ba)
    return float(0.5 * (np.mean(cos_ab) + np.mean(cos_ba)))


@dataclass(frozen=True)
class MetricReport:
    chamfer_mean: float
    chamfer_std: float
    nc_mean: float
    nc_std: float
    samples: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def _as_sampled_cloud(geom, count: int, seed) -> tuple[Array, Array | None]:
    if isinstance(geom, TriangleMesh):
        if len(geom.triangles) == 0:
            raise GeometryError("cannot sample an empty mesh")
        pts, nrm = sample_surface(geom, count, seed)
        return pts, nrm
    if isinstance(geom, PointCloud):
        return geom.positions, geom.normals
    raise GeometryError(f"unsupported geometry {type(geom).__name__}")


def evaluate_pair(pred, gt, samples: int = 100_000, seed: int = 0,
                  repeats: int = 1, squared: bool = False) -> MetricReport:
    """Sample both surfaces and report CD / NC (mean and std over repeats)."""
    cds, ncs = [], []
    for rep in range(repeats):
        pa, na = _as_sampled_cloud(pred, samples, [seed, rep, 0])
        pb, nb = _as_sampled_cloud(gt, samples, [seed, rep, 1])
        cds.append(chamfer(pa, pb, squared=squared))
        if na is not None and nb is not None:
            ncs.append(normal_consistency(pa, na, pb, nb))
    if not ncs:
        ncs = [float("nan")]
    return MetricReport(
        chamfer_mean=float(np.mean(cds)), chamfer_std=float(np.std(cds)),
        nc_mean=float(np.mean(ncs)), nc_std=float(np.std(ncs)),
        samples=samples, seed=seed,
    )
