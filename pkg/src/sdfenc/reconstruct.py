"""Dense field evaluation with grid-vector caching, isosurface extraction,
and mesh export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .geometry import Box, GeometryError, PointCloud, TriangleMesh
from .model import FieldModel

Array = np.ndarray


@dataclass
class DenseField:
    """Scalar field sampled on a regular corner lattice over the domain."""

    values: Array  # (R, R, R), indexed [ix, iy, iz]
    box: Box

    def __post_init__(self):
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError(f"dense field must be cubic, got {self.values.shape}")
        if self.resolution < 2:
            raise ValueError("dense field resolution must be >= 2")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return float(self.box.hi[0] - self.box.lo[0]) / (self.resolution - 1)


def lattice_points(resolution: int, box: Box) -> Array:
    """(R^3, 3) lattice corner positions, x-major ordering."""
    ax = [np.linspace(box.lo[d], box.hi[d], resolution) for d in range(3)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def evaluate_dense(model: FieldModel, cloud: PointCloud, resolution: int,
                   chunk_size: int = 65536, box: Box | None = None) -> DenseField:
    """Evaluate the field on the full lattice, encoding the cloud once.

    Chunking only bounds memory: per-sample results are bit-identical for
    any chunk size (the core's matrix kernel is batch-size independent).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    box = box or Box.unit()
    gv = model.encode(cloud)
    pts = lattice_points(resolution, box)
    out = np.empty(pts.shape[0], dtype=np.float64)
    for start in range(0, pts.shape[0], chunk_size):
        out[start:start + chunk_size] = model.evaluate(gv, pts[start:start + chunk_size])
    return DenseField(out.reshape(resolution, resolution, resolution), box)


def marching_cubes(field: DenseField, iso: float = 0.0) -> TriangleMesh:
    """Classic 256-case extraction with linear edge interpolation.

    Vertices are deduplicated per lattice edge so shared surface is stitched
    exactly; triangles wind outward for fields that are negative inside.  No
    crossings yields an (empty but valid) mesh.
    """
    vals = field.values
    if not np.all(np.isfinite(vals)):
        raise ValueError("dense field contains non-finite values")
    r = field.resolution
    h = field.spacing
    lo = field.box.lo

    inside = vals < iso
    # cube case index from the eight corner bits
    idx = np.zeros((r - 1, r - 1, r - 1), dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        idx |= inside[dx:r - 1 + dx, dy:r - 1 + dy, dz:r - 1 + dz].astype(np.int32) << bit
    active = np.argwhere((idx > 0) & (idx < 255))

    verts: list[np.ndarray] = []
    edge_vertex: dict[tuple[int, int, int, int], int] = {}
    tris: list[list[int]] = []

    def vertex_on_edge(ci: int, cj: int, ck: int, edge: int) -> int:
        c0, c1 = EDGE_CORNERS[edge]
        o0, o1 = CORNER_OFFSETS[c0], CORNER_OFFSETS[c1]
        p0 = (ci + o0[0], cj + o0[1], ck + o0[2])
        p1 = (ci + o1[0], cj + o1[1], ck + o1[2])
        axis = next(d for d in range(3) if o0[d] != o1[d])
        base = min(p0, p1)
        key = (base[0], base[1], base[2], axis)
        cached = edge_vertex.get(key)
        if cached is not None:
            return cached
        v0, v1 = float(vals[p0]), float(vals[p1])
        t = 0.5 if v1 == v0 else (iso - v0) / (v1 - v0)
        t = min(max(t, 0.0), 1.0)
        pos = lo + h * np.array(p0, dtype=np.float64)
        pos[axis] += h * t if p1[axis] > p0[axis] else -h * t
        edge_vertex[key] = len(verts)
        verts.append(pos)
        return edge_vertex[key]

    for ci, cj, ck in active:
        row = TRI_TABLE[idx[ci, cj, ck]]
        for t0 in range(0, len(row), 3):
            a = vertex_on_edge(ci, cj, ck, row[t0])
            b = vertex_on_edge(ci, cj, ck, row[t0 + 1])
            c = vertex_on_edge(ci, cj, ck, row[t0 + 2])
            if a != b and b != c and a != c:
                tris.append([a, c, b])  # reversed: outward for negative-inside

    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge shared by exactly two triangles."""
    if len(mesh.triangles) == 0:
        return False
    edges: dict[tuple[int, int], int] = {}
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            edges[key] = edges.get(key, 0) + 1
    return all(n == 2 for n in edges.values())


def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    """Write obj or ascii ply (9 significant digits, LF endings)."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("obj", "ply"):
        raise GeometryError(f"unsupported export format {fmt!r}")
    lines: list[str] = []
    if fmt == "obj":
        for v in mesh.vertices:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
        for t in mesh.triangles:
            lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    else:
        lines += ["ply", "format ascii 1.0",
                  f"element vertex {len(mesh.vertices)}",
                  "property float x", "property float y", "property float z",
                  f"element face {len(mesh.triangles)}",
                  "property list uchar int vertex_indices", "end_header"]
        for v in mesh.vertices:
            lines.append(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
        for t in mesh.triangles:
            lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    path.write_text("\n".join(lines) + "\n")
