"""Encoder + decoder bundle: the trainable distance field."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .decoder import DecoderConfig, decode, init_decoder_params
from .diffcore import ParamStore, Value
from . import diffcore as dc
from .encoder import EncoderConfig, GridVector, encode, init_encoder_params, query_latent
from .geometry import KnnGraph, PointCloud

Array = np.ndarray


@dataclass
class FieldModel:
    store: ParamStore
    encoder_cfg: EncoderConfig
    decoder_cfg: DecoderConfig

    @classmethod
    def create(cls, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
               seed: int = 0, dtype=np.float64) -> "FieldModel":
        store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        init_encoder_params(encoder_cfg, store, rng)
        init_decoder_params(decoder_cfg, encoder_cfg.features, store, rng)
        return cls(store=store, encoder_cfg=encoder_cfg, decoder_cfg=decoder_cfg)

    def encode(self, cloud: PointCloud, graph: KnnGraph | None = None,
               rng: np.random.Generator | None = None) -> GridVector:
        return encode(cloud, self.store, self.encoder_cfg, graph=graph, rng=rng)

    def field_fn(self, gv: GridVector) -> Callable[[Value], Value]:
        """Scalar field over a cached grid vector, as a tracked callable."""

        def field(x: Value) -> Value:
            latent = query_latent(gv, x, self.encoder_cfg.grid_to_point)
            return decode(latent, x, self.store, self.decoder_cfg)

        return field

    def evaluate(self, gv: GridVector, positions: Array) -> Array:
        """Field values at fixed positions, as a plain (s,) array."""
        out = self.field_fn(gv)(Value(np.asarray(positions, dtype=np.float64)))
        return out.data[:, 0]

    def gradient(self, gv: GridVector, positions: Array) -> Array:
        """Spatial field gradient at fixed positions, as a plain (s, 3) array."""
        g = dc.spatial_gradient(self.field_fn(gv), np.asarray(positions, dtype=np.float64))
        return np.array(g.data, copy=True)
