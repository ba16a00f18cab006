"""Point clouds, triangle meshes, file IO, normalization and sampling.

The training domain is the fixed box [-1, 1]^3; geometry is normalized into
it with a margin so surfaces stay clear of the boundary.  All sampling takes
an explicit seed or Generator and is reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

Array = np.ndarray

DOMAIN_MARGIN = 0.05


class GeometryError(ValueError):
    """Invalid or degenerate geometry."""


class ParseError(ValueError):
    """Malformed geometry file."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box."""

    lo: Array
    hi: Array

    @classmethod
    def unit(cls) -> "Box":
        return cls(lo=np.full(3, -1.0), hi=np.full(3, 1.0))

    @property
    def edges(self) -> Array:
        return self.hi - self.lo

    def contains(self, points: Array, tol: float = 0.0) -> bool:
        return bool(np.all(points >= self.lo - tol) and np.all(points <= self.hi + tol))


@dataclass
class PointCloud:
    positions: Array
    normals: Array | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or self.positions.shape[0] < 1:
            raise GeometryError(f"positions must be (n, 3) with n >= 1, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("non-finite coordinates in point cloud")
        if self.normals is not None:
            self.normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
            if self.normals.shape != self.positions.shape:
                raise GeometryError(
                    f"normals shape {self.normals.shape} != positions shape {self.positions.shape}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise GeometryError("normals must be unit length (within 1e-6)")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class TriangleMesh:
    vertices: Array
    triangles: Array
    vertex_normals: Array | None = None

    def __post_init__(self):
        self.vertices = np.atleast_2d(np.asarray(self.vertices, dtype=np.float64))
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise GeometryError("triangle index out of range")
        if self.vertex_normals is not None:
            self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64)

    def face_areas_normals(self) -> tuple[Array, Array]:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        cross = np.cross(b - a, c - a)
        norms = np.linalg.norm(cross, axis=1)
        areas = 0.5 * norms
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.where(norms[:, None] > 0, cross / np.maximum(norms, 1e-300)[:, None], 0.0)
        return areas, normals


@dataclass
class KnnGraph:
    """Directed k-nearest-neighbor edges: neighbors[i] are the targets of i."""

    neighbors: Array  # (n, k), ordered by distance then index
    k: int

    @property
    def num_vertices(self) -> int:
        return self.neighbors.shape[0]

    @property
    def edges(self) -> Array:
        n, k = self.neighbors.shape
        src = np.repeat(np.arange(n, dtype=np.int64), k)
        return np.stack([src, self.neighbors.reshape(-1)], axis=1)


@dataclass
class SampleSet:
    """The three training sample classes drawn around one shape."""

    surface: Array
    surface_normals: Array | None
    offsurface_uniform: Array
    near_surface: Array
    domain: Box

    @property
    def all_points(self) -> Array:
        return np.concatenate([self.surface, self.offsurface_uniform, self.near_surface], axis=0)


@dataclass(frozen=True)
class NormalizationTransform:
    """p -> (p + translation) * scale, mapping a source box into the domain."""

    translation: Array
    scale: float

    def apply(self, points: Array) -> Array:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: Array) -> Array:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation


# ---------------------------------------------------------------------------
# file IO


def _parse_xyz(lines: list[str], path: str) -> PointCloud:
    pos, nrm = [], []
    for ln, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) not in (3, 6):
            raise ParseError(f"{path}:{ln}: expected 3 or 6 columns, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}:{ln}: non-numeric value") from None
        pos.append(vals[:3])
        if len(parts) == 6:
            nrm.append(vals[3:])
    if not pos:
        raise ParseError(f"{path}: no points")
    if nrm and len(nrm) != len(pos):
        raise ParseError(f"{path}: normals present on some lines only")
    normals = None
    if nrm:
        normals = np.asarray(nrm, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths < 1e-12):
            bad = int(np.argmax(lengths < 1e-12))
            raise ParseError(f"{path}: zero-length normal at point {bad}")
        normals = normals / lengths[:, None]
    return PointCloud(np.asarray(pos, dtype=np.float64), normals)


def _parse_obj(lines: list[str], path: str) -> TriangleMesh | PointCloud:
    verts, vnormals, faces = [], [], []
    for ln, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError(f"{path}:{ln}: vertex needs 3 coordinates")
            try:
                verts.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-numeric vertex") from None
        elif tag == "vn":
            try:
                vnormals.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-numeric normal") from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError(f"{path}:{ln}: face needs at least 3 vertices")
            try:
                idx = [int(p.split("/", 1)[0]) for p in parts[1:]]
            except ValueError:
                raise ParseError(f"{path}:{ln}: bad face index") from None
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for a, b in zip(idx[1:-1], idx[2:]):  # fan triangulation
                faces.append([idx[0], a, b])
        elif tag in ("vt", "s", "o", "g", "mtllib", "usemtl"):
            continue
        else:
            raise ParseError(f"{path}:{ln}: unsupported element {tag!r}")
    if not verts:
        raise ParseError(f"{path}: no vertices")
    vn = None
    if vnormals and len(vnormals) == len(verts):
        vn = np.asarray(vnormals, dtype=np.float64)
        vn = vn / np.maximum(np.linalg.norm(vn, axis=1), 1e-300)[:, None]
    if faces:
        return TriangleMesh(np.asarray(verts), np.asarray(faces), vn)
    return PointCloud(np.asarray(verts), vn)


def _parse_ply(lines: list[str], path: str) -> TriangleMesh | PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: missing ply magic")
    n_vert = n_face = 0
    props: list[str] = []
    current = None
    body_start = None
    for ln, raw in enumerate(lines[1:], start=2):
        text = raw.strip()
        if text.startswith("comment"):
            continue
        if text.startswith("format"):
            if "ascii" not in text:
                raise ParseError(f"{path}:{ln}: only ascii ply is supported")
        elif text.startswith("element vertex"):
            n_vert = int(text.split()[-1])
            current = "vertex"
        elif text.startswith("element face"):
            n_face = int(text.split()[-1])
            current = "face"
        elif text.startswith("element"):
            raise ParseError(f"{path}:{ln}: unsupported element {text.split()[1]!r}")
        elif text.startswith("property") and current == "vertex":
            props.append(text.split()[-1])
        elif text == "end_header":
            body_start = ln
            break
    if body_start is None:
        raise ParseError(f"{path}: missing end_header")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError(f"{path}: vertex properties must start with x y z, got {props}")
    has_normals = props[3:6] == ["nx", "ny", "nz"]

    body = lines[body_start:]
    if len(body) < n_vert + n_face:
        raise ParseError(f"{path}: truncated body ({len(body)} rows, need {n_vert + n_face})")
    verts = np.zeros((n_vert, 3))
    normals = np.zeros((n_vert, 3)) if has_normals else None
    for i in range(n_vert):
        parts = body[i].split()
        if len(parts) < len(props):
            raise ParseError(f"{path}:{body_start + 1 + i}: short vertex row")
        verts[i] = [float(p) for p in parts[:3]]
        if has_normals:
            normals[i] = [float(p) for p in parts[3:6]]
    faces = []
    for i in range(n_face):
        parts = body[n_vert + i].split()
        if int(parts[0]) != 3:
            raise ParseError(f"{path}:{body_start + 1 + n_vert + i}: only triangle faces supported")
        faces.append([int(p) for p in parts[1:4]])
    if normals is not None and n_vert:
        normals = normals / np.maximum(np.linalg.norm(normals, axis=1), 1e-300)[:, None]
    if faces or n_vert == 0:
        return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3), normals)
    return PointCloud(verts, normals)


def load_geometry(path, fmt: str | None = None) -> TriangleMesh | PointCloud:
    """Load obj / ply-ascii / xyz; clouds when no faces, meshes otherwise."""
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    lines = path.read_text().splitlines()
    if fmt == "xyz":
        return _parse_xyz(lines, str(path))
    if fmt == "obj":
        return _parse_obj(lines, str(path))
    if fmt == "ply":
        return _parse_ply(lines, str(path))
    raise ParseError(f"unsupported format {fmt!r} (use obj, ply or xyz)")


# ---------------------------------------------------------------------------
# normalization


def normalize_to_unit_box(geometry, margin: float = DOMAIN_MARGIN):
    """Scale and center into [-1, 1]^3 with the given boundary margin.

    Returns (normalized geometry, transform); the longest bounding-box edge
    maps to length 2 * (1 - margin).
    """
    pts = geometry.vertices if isinstance(geometry, TriangleMesh) else geometry.positions
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise GeometryError("cannot normalize: all points coincide")
    center = 0.5 * (lo + hi)
    tf = NormalizationTransform(translation=-center, scale=2.0 * (1.0 - margin) / extent)
    if isinstance(geometry, TriangleMesh):
        return TriangleMesh(tf.apply(geometry.vertices), geometry.triangles,
                            geometry.vertex_normals), tf
    return PointCloud(tf.apply(geometry.positions), geometry.normals), tf


# ---------------------------------------------------------------------------
# k-NN graph


def build_knn_graph(points, k: int) -> KnnGraph:
    """k nearest other points by Euclidean distance, ties to lower index."""
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = pos.shape[0]
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    if k > n - 1:
        warnings.warn(f"k={k} clamped to n-1={n - 1}")
        k = n - 1
    if k == 0:
        raise GeometryError("k-NN graph needs at least 2 points")

    tree = cKDTree(pos)
    # self is among the k+1 closest; one extra neighbor exposes boundary ties
    m = min(n, k + 2)
    dist, idx = tree.query(pos, k=m)
    neighbors = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        cand_d, cand_i = dist[i], idx[i]
        keep = cand_i != i
        cand_d, cand_i = cand_d[keep][:k + 1], cand_i[keep][:k + 1]
        if cand_d.size > k and cand_d[k - 1] == cand_d[k]:
            # tie at the selection boundary: resolve exactly by full scan
            d_all = np.linalg.norm(pos - pos[i], axis=1)
            d_all[i] = np.inf
            order = np.lexsort((np.arange(n), d_all))
            neighbors[i] = order[:k]
        else:
            order = np.lexsort((cand_i, cand_d))
            neighbors[i] = cand_i[order][:k]
    return KnnGraph(neighbors=neighbors, k=k)


# ---------------------------------------------------------------------------
# sampling


def sample_surface(mesh: TriangleMesh, count: int, seed) -> tuple[Array, Array]:
    """Area-weighted surface samples with face normals."""
    rng = _rng(seed)
    areas, normals = mesh.face_areas_normals()
    usable = areas > 0
    if not np.all(usable):
        warnings.warn(f"skipping {int((~usable).sum())} zero-area triangles")
    total = float(areas[usable].sum())
    if total <= 0:
        raise GeometryError("mesh has zero total area")
    tri_ids = np.flatnonzero(usable)
    probs = areas[usable] / total
    chosen = tri_ids[rng.choice(tri_ids.size, size=count, p=probs)]

    a = mesh.vertices[mesh.triangles[chosen, 0]]
    b = mesh.vertices[mesh.triangles[chosen, 1]]
    c = mesh.vertices[mesh.triangles[chosen, 2]]
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return pts, normals[chosen]


def sample_offsurface_uniform(domain: Box, count: int, seed) -> Array:
    """I.i.d. uniform points in the domain box."""
    rng = _rng(seed)
    return rng.uniform(domain.lo, domain.hi, size=(count, 3))


def sample_near_surface(points: Array, normals: Array | None, delta: float, seed,
                        domain: Box | None = None) -> Array:
    """Displace surface points along their normals by U(-delta, delta)."""
    if normals is None:
        raise GeometryError("near-surface sampling needs normals")
    rng = _rng(seed)
    points = np.asarray(points, dtype=np.float64)
    u = rng.uniform(-delta, delta, size=points.shape[0])
    out = points + u[:, None] * np.asarray(normals, dtype=np.float64)
    if domain is not None:
        out = np.clip(out, domain.lo, domain.hi)
    return out


def perturb_along_normals(points: Array, normals: Array | None, sigma: float, seed,
                          domain: Box | None = None) -> Array:
    """Noise augmentation for encoder inputs; same mechanism as near-surface
    sampling (uniform displacement along the normal, clamped to the domain)."""
    if sigma < 0:
        raise GeometryError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array(points, dtype=np.float64, copy=True)
    return sample_near_surface(points, normals, sigma, seed, domain)


def make_sample_set(cloud: PointCloud, surface_count: int, uniform_count: int,
                    near_count: int, near_delta: float, seed,
                    domain: Box | None = None) -> SampleSet:
    """Draw the three training sample classes from a prepared cloud."""
    rng = _rng(seed)
    domain = domain or Box.unit()
    n = len(cloud)
    idx = rng.choice(n, size=surface_count, replace=surface_count > n)
    surface = cloud.positions[idx]
    surface_normals = cloud.normals[idx] if cloud.normals is not None else None
    uniform = sample_offsurface_uniform(domain, uniform_count, rng)
    if near_count > 0:
        if cloud.normals is None:
            raise GeometryError("near-surface samples need normals")
        nidx = rng.choice(n, size=near_count, replace=near_count > n)
        near = sample_near_surface(cloud.positions[nidx], cloud.normals[nidx],
                                   near_delta, rng, domain)
    else:
        near = np.zeros((0, 3))
    return SampleSet(surface, surface_normals, uniform, near, domain)
