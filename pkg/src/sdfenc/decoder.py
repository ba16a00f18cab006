"""Modulated sine decoder: (latent, position) -> scalar distance value.

A sine-activated MLP on the position, with each hidden activation multiplied
element-wise by the activations of a ReLU MLP on the latent code.  Smooth in
the position (away from the modulator's ReLU kinks), so spatial gradients of
the output are well defined training targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Value

Array = np.ndarray


@dataclass(frozen=True)
class DecoderConfig:
    width: int | None = None        # hidden width; defaults to the latent size
    depth: int = 3                  # number of sine layers
    omega0: float = 30.0
    modulator_latent_skip: bool = False
    # initial output offset: starting slightly positive breaks the
    # inside/outside symmetry so the far field cannot settle into spurious
    # negative pockets (which the off-surface exponential then entrenches)
    out_bias: float = 0.1

    def __post_init__(self):
        if self.width is not None and self.width < 1:
            raise ValueError("width must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")

    def hidden(self, latent_size: int) -> int:
        return self.width if self.width is not None else latent_size


def init_decoder_params(cfg: DecoderConfig, latent_size: int, store: ParamStore,
                        rng: np.random.Generator) -> None:
    """Register decoder tensors under the 'decoder.' prefix.

    Sine layers follow the standard scheme for periodic activations: first
    layer U(-1/3, 1/3) (1/fan_in for 3-d input), later layers
    U(-sqrt(6/w)/omega0, sqrt(6/w)/omega0).  The final layer starts small so
    the field begins near zero.
    """
    w = cfg.hidden(latent_size)
    store.add("decoder.sine0.weight", rng.uniform(-1 / 3, 1 / 3, size=(3, w)))
    store.add("decoder.sine0.bias", rng.uniform(-1, 1, size=w) / np.sqrt(3))
    for i in range(1, cfg.depth):
        bound = np.sqrt(6.0 / w) / cfg.omega0
        store.add(f"decoder.sine{i}.weight", rng.uniform(-bound, bound, size=(w, w)))
        store.add(f"decoder.sine{i}.bias", rng.uniform(-1, 1, size=w) / np.sqrt(w))
    store.add("decoder.out.weight", rng.uniform(-1e-2, 1e-2, size=(w, 1)))
    store.add("decoder.out.bias", np.full(1, cfg.out_bias))

    fan = latent_size
    store.add("decoder.mod0.weight", rng.uniform(-1, 1, size=(latent_size, w)) / np.sqrt(fan))
    store.add("decoder.mod0.bias", rng.uniform(-1, 1, size=w) / np.sqrt(fan))
    for i in range(1, cfg.depth):
        fan = w + (latent_size if cfg.modulator_latent_skip else 0)
        store.add(f"decoder.mod{i}.weight", rng.uniform(-1, 1, size=(fan, w)) / np.sqrt(fan))
        store.add(f"decoder.mod{i}.bias", rng.uniform(-1, 1, size=w) / np.sqrt(fan))


def decoder_param_count(cfg: DecoderConfig, latent_size: int) -> int:
    w = cfg.hidden(latent_size)
    synth = (3 * w + w) + (cfg.depth - 1) * (w * w + w) + (w + 1)
    mod_in = w + (latent_size if cfg.modulator_latent_skip else 0)
    mod = (latent_size * w + w) + (cfg.depth - 1) * (mod_in * w + w)
    return synth + mod


def decode(latent: Value, positions, store: ParamStore, cfg: DecoderConfig) -> Value:
    """Evaluate the field: (s, f) latents and (s, 3) positions -> (s, 1)."""
    pos = dc.as_value(positions)
    if pos.shape[0] != latent.shape[0]:
        raise ValueError(f"{latent.shape[0]} latents but {pos.shape[0]} positions")

    m = dc.relu(dc.linear(latent, store["decoder.mod0.weight"], store["decoder.mod0.bias"]))
    h = dc.mul(dc.sin(dc.scale(dc.linear(pos, store["decoder.sine0.weight"],
                                         store["decoder.sine0.bias"]), cfg.omega0)), m)
    for i in range(1, cfg.depth):
        mod_in = dc.concat([m, latent], axis=1) if cfg.modulator_latent_skip else m
        m = dc.relu(dc.linear(mod_in, store[f"decoder.mod{i}.weight"], store[f"decoder.mod{i}.bias"]))
        h = dc.mul(dc.sin(dc.scale(dc.linear(h, store[f"decoder.sine{i}.weight"],
                                             store[f"decoder.sine{i}.bias"]), cfg.omega0)), m)
    return dc.linear(h, store["decoder.out.weight"], store["decoder.out.bias"])
