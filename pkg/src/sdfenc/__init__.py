"""Neural distance fields from surface point clouds.

Encoder-decoder toolkit: hybrid graph/grid convolution encoder producing
multi-resolution latent grids, a modulated sine decoder, eikonal-loss
training from zero-level-set samples only, plus reconstruction and
evaluation tooling.
"""

__version__ = "0.1.0"
