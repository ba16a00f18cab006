"""Point-to-grid transfers and grid-to-point sampling.

Two scatter operators (per-cell max pooling, and normalized hat-kernel
projection borrowed from hybrid particle/grid simulation) plus trilinear and
nearest-neighbor sampling of cell-centered feature grids.

Grid nodes are cell centers.  Positions are clamped into the center hull
(the box spanned by the outermost centers) before any weight computation,
so hat/trilinear stencils are always fully supported and weights sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .geometry import Box, GeometryError

Array = np.ndarray


@dataclass(frozen=True)
class GridSpec:
    """Cell-centered grid layout: resolution cells per axis over a box."""

    resolution: int
    channels: int
    box: Box = field(default_factory=Box.unit)

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"grid resolution must be >= 2, got {self.resolution}")
        if self.channels < 1:
            raise ValueError(f"grid channels must be >= 1, got {self.channels}")

    @property
    def spacing(self) -> float:
        """Cell edge length h (cubic domain assumed)."""
        return float(self.box.hi[0] - self.box.lo[0]) / self.resolution

    @property
    def num_cells(self) -> int:
        return self.resolution ** 3

    def cell_centers(self) -> Array:
        """(r^3, 3) centers ordered by linear index (i*r + j)*r + k."""
        r = self.resolution
        h = self.spacing
        ax = self.box.lo[0] + (np.arange(r) + 0.5) * h
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass
class LatentGrid:
    """One cell-centered feature grid: values (r^3, channels) as a Value."""

    spec: GridSpec
    values: Value

    def __post_init__(self):
        expect = (self.spec.num_cells, self.spec.channels)
        if self.values.shape != expect:
            raise ValueError(f"grid values shape {self.values.shape}, expected {expect}")


def hat_weight(x):
    """Linear hat kernel: 1 - |x| inside (-1, 1), zero outside."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, 1.0 - np.abs(x), 0.0)


def _check_inside(points: Array, box: Box) -> None:
    if points.size and (np.any(points < box.lo - 1e-12) or np.any(points > box.hi + 1e-12)):
        bad = int(np.argmax(np.any((points < box.lo - 1e-12) | (points > box.hi + 1e-12), axis=1)))
        raise GeometryError(f"point {bad} at {points[bad]} lies outside the domain box")


def _hull_cells(points: Array, spec: GridSpec) -> tuple[Array, Array]:
    """Base cell index and fractional offset of each point in the center hull.

    Returns (i0 (n,3) int, frac (n,3) float) with i0 in [0, r-2] and the hat
    weights of centers i0 / i0+1 equal to 1-frac / frac per axis.
    """
    r = spec.resolution
    h = spec.spacing
    half = 0.5 * h
    clamped = np.clip(points, spec.box.lo + half, spec.box.hi - half)
    u = (clamped - spec.box.lo) / h - 0.5
    i0 = np.floor(u).astype(np.int64)
    np.clip(i0, 0, r - 2, out=i0)
    frac = u - i0
    return i0, frac


_CORNERS = np.array([(di, dj, dk) for di in (0, 1) for dj in (0, 1) for dk in (0, 1)], dtype=np.int64)


def _corner_indices(i0: Array, spec: GridSpec) -> Array:
    """(n, 8) linear cell indices of the 2x2x2 stencil around each point."""
    r = spec.resolution
    ijk = i0[:, None, :] + _CORNERS[None, :, :]
    return (ijk[..., 0] * r + ijk[..., 1]) * r + ijk[..., 2]


def _corner_weights(frac: Array) -> Array:
    """(n, 8) trilinear/hat weights matching _corner_indices order."""
    one = 1.0 - frac
    w = np.empty((frac.shape[0], 8), dtype=frac.dtype)
    for c, (di, dj, dk) in enumerate(_CORNERS):
        wx = frac[:, 0] if di else one[:, 0]
        wy = frac[:, 1] if dj else one[:, 1]
        wz = frac[:, 2] if dk else one[:, 2]
        w[:, c] = wx * wy * wz
    return w


def pic_project(points: Array, features: Value, spec: GridSpec,
                dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> LatentGrid:
    """Scatter point features to cell centers with normalized hat weights.

    Each point contributes w = hat((p-x_i)/h) per axis to its 8 enclosing
    centers; per-cell features are the weight-normalized sums (unit point
    masses).  Cells with accumulated weight <= 1e-12 stay zero.  Gradients
    flow through the features only; positions are fixed inputs.

    dropout_p drops individual (point, cell) contributions; the surviving
    weights are renormalized.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if features.shape[0] != n:
        raise ValueError(f"{n} points but {features.shape[0]} feature rows")
    _check_inside(points, spec.box)

    i0, frac = _hull_cells(points, spec)
    cells = _corner_indices(i0, spec).reshape(-1)          # contributions in point-major
    weights = _corner_weights(frac).reshape(-1)            # order: deterministic scatter
    if dropout_p > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        weights = weights * (rng.random(weights.shape) >= dropout_p)

    wsum = np.zeros(spec.num_cells, dtype=np.float64)
    np.add.at(wsum, cells, weights)
    inv = np.where(wsum > 1e-12, 1.0 / np.maximum(wsum, 1e-300), 0.0)

    rows = dc.gather_rows(features, np.repeat(np.arange(n, dtype=np.int64), 8))
    weighted = dc.mul(rows, Value(weights[:, None]))
    raw = dc.scatter_add_rows(weighted, cells, spec.num_cells)
    values = dc.mul(raw, Value(inv[:, None]))
    return LatentGrid(spec, values)


def maxpool_voxelize(points: Array, features: Value, spec: GridSpec) -> LatentGrid:
    """Per-cell, per-channel max over the points inside each cell.

    Empty cells are zero.  The gradient routes to the contributing point
    (ties: lowest point index, via stable in-cell ordering).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if features.shape[0] != n:
        raise ValueError(f"{n} points but {features.shape[0]} feature rows")
    _check_inside(points, spec.box)

    r = spec.resolution
    ijk = np.floor((points - spec.box.lo) / spec.spacing).astype(np.int64)
    np.clip(ijk, 0, r - 1, out=ijk)
    cell = (ijk[:, 0] * r + ijk[:, 1]) * r + ijk[:, 2]

    order = np.argsort(cell, kind="stable")                # in-cell order = point index
    sorted_cells = cell[order]
    uniq, starts, counts = np.unique(sorted_cells, return_index=True, return_counts=True)
    m = int(counts.max()) if counts.size else 0
    slots = np.zeros((uniq.size, m), dtype=np.int64)
    valid = np.zeros((uniq.size, m), dtype=np.float64)
    for row, (s, c) in enumerate(zip(starts, counts)):
        slots[row, :c] = order[s:s + c]
        valid[row, :c] = 1.0

    gathered = dc.gather_rows(features, slots.reshape(-1))
    gathered = dc.reshape(gathered, (uniq.size, m, spec.channels))
    # send padding slots far below any real feature so max ignores them
    pad = Value(((1.0 - valid) * -1e300)[:, :, None])
    masked = dc.add(dc.mul(gathered, Value(valid[:, :, None])), pad)
    per_cell = dc.reduce_max(masked, axis=1)
    values = dc.scatter_add_rows(per_cell, uniq, spec.num_cells)
    return LatentGrid(spec, values)


def _weighted_gather(values: Value, idx: Array, weights: Array) -> Value:
    """sum_c weights[:, c] * values[idx[:, c]]: the fused stencil gather.

    idx and weights are fixed (s, 8) arrays; differentiable in values only.
    The per-row reduction runs over the fixed stencil axis, so results do
    not depend on how queries are batched.
    """
    s = idx.shape[0]
    data = np.einsum("sc,scf->sf", weights, values.data[idx])

    def vjp(cot: Value):
        rows = dc.gather_rows(cot, np.repeat(np.arange(s, dtype=np.int64), idx.shape[1]))
        contrib = dc.mul(rows, Value(weights.reshape(-1, 1)))
        return (dc.scatter_add_rows(contrib, idx.reshape(-1), values.shape[0]),)

    return dc._make(data, (values,), vjp)


def trilinear_sample(grid: LatentGrid, queries) -> Value:
    """Interpolate grid values at query points from the 8 closest centers.

    Differentiable in the grid values and (when given as a tracked Value) in
    the query positions; the position derivative itself remains
    differentiable in the grid values.
    """
    spec = grid.spec
    half = 0.5 * spec.spacing
    tracked = isinstance(queries, Value) and queries.requires_grad
    if not tracked:
        # fixed queries: weights are constants, one fused gather suffices
        q = queries.data if isinstance(queries, Value) else np.asarray(queries, dtype=np.float64)
        i0, frac = _hull_cells(q, spec)
        return _weighted_gather(grid.values, _corner_indices(i0, spec), _corner_weights(frac))

    q = queries
    qc = dc.clip(q, spec.box.lo[0] + half, spec.box.hi[0] - half)
    i0, _ = _hull_cells(qc.data, spec)
    # fractional offsets as tracked ops so query gradients flow
    u = dc.scale(dc.sub(qc, Value(np.full(3, spec.box.lo[0] + half))), 1.0 / spec.spacing)
    frac = dc.sub(u, Value(i0.astype(np.float64)))

    fx = dc.narrow(frac, 1, 0, 1)
    fy = dc.narrow(frac, 1, 1, 1)
    fz = dc.narrow(frac, 1, 2, 1)
    ones = Value(np.ones_like(fx.data))
    wx = (dc.sub(ones, fx), fx)
    wy = (dc.sub(ones, fy), fy)
    wz = (dc.sub(ones, fz), fz)

    corners = _corner_indices(i0, spec)
    out = None
    for c, (di, dj, dk) in enumerate(_CORNERS):
        w = dc.mul(dc.mul(wx[di], wy[dj]), wz[dk])
        term = dc.mul(dc.gather_rows(grid.values, corners[:, c]), w)
        out = term if out is None else dc.add(out, term)
    return out


def nearest_sample(grid: LatentGrid, queries) -> Value:
    """Value of the cell whose center is closest (ties: lowest linear index)."""
    q = np.asarray(queries.data if isinstance(queries, Value) else queries, dtype=np.float64)
    spec = grid.spec
    r = spec.resolution
    u = (q - spec.box.lo) / spec.spacing
    idx = np.floor(u).astype(np.int64)
    # a query exactly on a cell face ties between the two centers: take lower
    idx = np.where((u == idx) & (idx >= 1), idx - 1, idx)
    np.clip(idx, 0, r - 1, out=idx)
    lin = (idx[:, 0] * r + idx[:, 1]) * r + idx[:, 2]
    return dc.gather_rows(grid.values, lin)
