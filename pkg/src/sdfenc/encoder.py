"""Multi-resolution hybrid point/grid encoder.

Input points are positionally encoded and embedded, then passed through a
stack of convolution blocks with strictly increasing grid resolution.  Each
block runs a graph convolution over the k-NN edges, scatters vertex features
onto its grid (max pooling or normalized hat projection), exchanges
neighborhood information with a stride-2 conv/deconv pair, interpolates the
grid back onto the vertices, and fuses both paths with a per-vertex linear
layer.  The deconvolved grids form the grid vector; latent codes for query
points are trilinear samples of every level, summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Value
from .geometry import Box, GeometryError, KnnGraph, PointCloud, build_knn_graph
from .transfer import GridSpec, LatentGrid, maxpool_voxelize, nearest_sample, pic_project, trilinear_sample

Array = np.ndarray


@dataclass(frozen=True)
class EncoderConfig:
    resolutions: tuple[int, ...] = (4, 8, 16, 32)
    features: int = 64
    knn: int = 8
    transfer: str = "pic"                  # pic | maxpool
    grid_to_point: str = "trilinear"       # trilinear | nearest
    graph_conv: bool = True
    grid_conv: bool = True
    use_normals: bool = False
    pe_frequencies: int = 4
    pic_dropout: float = 0.0

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if len(res) < 1 or any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"resolutions must be strictly increasing, got {res}")
        if self.grid_conv and any(r % 2 for r in res):
            raise ValueError(f"grid conv needs even resolutions, got {res}")
        if self.features < 1:
            raise ValueError("features must be >= 1")
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")
        if self.transfer not in ("pic", "maxpool"):
            raise ValueError(f"unknown transfer mode {self.transfer!r}")
        if self.grid_to_point not in ("trilinear", "nearest"):
            raise ValueError(f"unknown grid-to-point mode {self.grid_to_point!r}")
        if not 0.0 <= self.pic_dropout < 1.0:
            raise ValueError("pic_dropout must be in [0, 1)")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.pe_frequencies + (3 if self.use_normals else 0)


def paper_large() -> EncoderConfig:
    """Five-level, latent-size-64 preset used for full-scale comparisons."""
    return EncoderConfig(resolutions=(4, 8, 16, 32, 64), features=64)


@dataclass
class GridVector:
    """The per-level deconvolved latent grids, in block order."""

    grids: list[LatentGrid]

    def __post_init__(self):
        if not self.grids:
            raise ValueError("grid vector needs at least one level")
        f = self.grids[0].spec.channels
        if any(g.spec.channels != f for g in self.grids):
            raise ValueError("all grid vector levels must share the channel count")


def positional_encode(positions: Array, frequencies: int) -> Array:
    """[p, sin(2^l pi p), cos(2^l pi p) for l < frequencies], per coordinate."""
    p = np.asarray(positions, dtype=np.float64)
    parts = [p]
    for l in range(frequencies):
        arg = (2.0 ** l) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=1)


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Array:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: EncoderConfig, store: ParamStore, rng: np.random.Generator) -> None:
    """Register all encoder tensors under the 'encoder.' prefix."""
    f = cfg.features
    store.add("encoder.embed.weight", _uniform_init(rng, cfg.input_dim, (cfg.input_dim, f)))
    store.add("encoder.embed.bias", _uniform_init(rng, cfg.input_dim, (f,)))
    for i, _ in enumerate(cfg.resolutions):
        p = f"encoder.block{i}"
        if cfg.graph_conv:
            store.add(f"{p}.edge.weight", _uniform_init(rng, 2 * f, (2 * f, f)))
            store.add(f"{p}.edge.bias", _uniform_init(rng, 2 * f, (f,)))
        if cfg.grid_conv:
            store.add(f"{p}.conv.weight", _uniform_init(rng, 8 * f, (8 * f, 2 * f)))
            store.add(f"{p}.conv.bias", _uniform_init(rng, 8 * f, (2 * f,)))
            store.add(f"{p}.deconv.weight", _uniform_init(rng, 2 * f, (2 * f, 8 * f)))
            store.add(f"{p}.deconv.bias", _uniform_init(rng, 2 * f, (f,)))
        store.add(f"{p}.fc.weight", _uniform_init(rng, f, (f, f)))
        store.add(f"{p}.fc.bias", _uniform_init(rng, f, (f,)))


def encoder_param_count(cfg: EncoderConfig) -> int:
    f = cfg.features
    total = cfg.input_dim * f + f
    per = f * f + f
    if cfg.graph_conv:
        per += 2 * f * f + f
    if cfg.grid_conv:
        per += 8 * f * 2 * f + 2 * f + 2 * f * 8 * f + f
    return total + per * len(cfg.resolutions)


def edge_conv(features: Value, graph: KnnGraph, weight: Value, bias: Value) -> Value:
    """EdgeConv: per edge ReLU(W [f_i ; f_j - f_i] + b), per-vertex max."""
    n, f = features.shape
    if graph.num_vertices != n:
        raise ValueError(f"graph has {graph.num_vertices} vertices, features {n}")
    k = graph.k
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = graph.neighbors.reshape(-1)
    fi = dc.gather_rows(features, src)
    fj = dc.gather_rows(features, dst)
    msg = dc.relu(dc.linear(dc.concat([fi, dc.sub(fj, fi)], axis=1), weight, bias))
    return dc.reduce_max(dc.reshape(msg, (n, k, f)), axis=1)


@lru_cache(maxsize=None)
def _space_to_depth_indices(r: int) -> tuple[Array, Array]:
    """Fine-to-coarse gather order and its inverse for a 2x stride.

    forward[p * 8 + o] is the fine linear index of child o of coarse cell p;
    inverse is the permutation scattering (p, o) rows back to fine order.
    """
    rc = r // 2
    ii, jj, kk = np.meshgrid(np.arange(rc), np.arange(rc), np.arange(rc), indexing="ij")
    base = np.stack([2 * ii.ravel(), 2 * jj.ravel(), 2 * kk.ravel()], axis=1)
    offsets = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    child = base[:, None, :] + offsets[None, :, :]
    fwd = ((child[..., 0] * r + child[..., 1]) * r + child[..., 2]).reshape(-1)
    inv = np.empty(r ** 3, dtype=np.int64)
    inv[fwd] = np.arange(r ** 3)
    return fwd, inv


def _grid_conv_pair(grid: LatentGrid, store: ParamStore, prefix: str) -> LatentGrid:
    """Stride-2 kernel-2 conv (channels f -> 2f) then transposed conv back."""
    spec = grid.spec
    r, f = spec.resolution, spec.channels
    fwd, inv = _space_to_depth_indices(r)
    coarse_cells = (r // 2) ** 3

    packed = dc.reshape(dc.gather_rows(grid.values, fwd), (coarse_cells, 8 * f))
    hidden = dc.relu(dc.linear(packed, store[f"{prefix}.conv.weight"], store[f"{prefix}.conv.bias"]))
    spread = dc.reshape(dc.matmul(hidden, store[f"{prefix}.deconv.weight"]), (r ** 3, f))
    out = dc.relu(dc.add(dc.gather_rows(spread, inv), store[f"{prefix}.deconv.bias"]))
    return LatentGrid(spec, out)


def conv_block(features: Value, positions: Array, graph: KnnGraph, spec: GridSpec,
               store: ParamStore, prefix: str, cfg: EncoderConfig,
               rng: np.random.Generator | None = None) -> tuple[Value, LatentGrid]:
    """One hybrid block; returns (vertex features, deconvolved latent grid)."""
    if cfg.graph_conv:
        g = edge_conv(features, graph, store[f"{prefix}.edge.weight"], store[f"{prefix}.edge.bias"])
    else:
        g = features

    if cfg.transfer == "pic":
        grid = pic_project(positions, g, spec, dropout_p=cfg.pic_dropout, rng=rng)
    else:
        grid = maxpool_voxelize(positions, g, spec)

    if cfg.grid_conv:
        grid = _grid_conv_pair(grid, store, prefix)

    if cfg.grid_to_point == "trilinear":
        v = trilinear_sample(grid, positions)
    else:
        v = nearest_sample(grid, positions)

    out = dc.relu(dc.linear(dc.add(g, v), store[f"{prefix}.fc.weight"], store[f"{prefix}.fc.bias"]))
    return out, grid


def encode(cloud: PointCloud, store: ParamStore, cfg: EncoderConfig,
           graph: KnnGraph | None = None, rng: np.random.Generator | None = None,
           domain: Box | None = None) -> GridVector:
    """Run the encoder stack; vertex features of the last block are dropped."""
    positions = cloud.positions
    domain = domain or Box.unit()
    if not domain.contains(positions, tol=1e-12):
        raise GeometryError("cloud is not normalized into the domain box")
    feats = positional_encode(positions, cfg.pe_frequencies)
    if cfg.use_normals:
        if cloud.normals is None:
            raise GeometryError("encoder configured with use_normals but cloud has none")
        feats = np.concatenate([feats, cloud.normals], axis=1)
    x = dc.relu(dc.linear(Value(feats), store["encoder.embed.weight"], store["encoder.embed.bias"]))

    if graph is None:
        graph = build_knn_graph(positions, cfg.knn)

    grids: list[LatentGrid] = []
    for i, r in enumerate(cfg.resolutions):
        spec = GridSpec(r, cfg.features, domain)
        x, grid = conv_block(x, positions, graph, spec, store, f"encoder.block{i}", cfg, rng)
        grids.append(grid)
    return GridVector(grids)


def query_latent(gv: GridVector, queries, mode: str = "trilinear") -> Value:
    """Sample every level at the query points and sum element-wise."""
    out = None
    for grid in gv.grids:
        s = trilinear_sample(grid, queries) if mode == "trilinear" else nearest_sample(grid, queries)
        out = s if out is None else dc.add(out, s)
    return out
