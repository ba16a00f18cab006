"""Eikonal training objective evaluated as Monte Carlo means over a SampleSet.

Four terms: the eikonal residual |‖grad‖ - 1| over all samples, |value| on
surface samples, normal alignment of the gradient on surface samples, and an
exponential pushing off-surface values away from zero.  Two lenient modes
for badly oriented inputs: sign-agnostic drops the normal's sign in the
alignment term; unsigned additionally penalizes negative values off the
surface so the trained field is effectively nonnegative.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Value
from .geometry import SampleSet

MODES = ("signed", "sign-agnostic", "unsigned")


@dataclass(frozen=True)
class LossWeights:
    """Term weights for the training objective.

    The alignment term is unbounded below (it rewards ever-larger surface
    gradients), so the eikonal weight must dominate it per sample:
    keep eikonal * n_surface / n_total > normal, where n_total counts all
    three sample classes.  The defaults leave a 1.7x margin at equal class
    counts; equal eikonal/normal weights are known to diverge.
    """

    eikonal: float = 250.0
    surface: float = 300.0
    normal: float = 50.0
    offsurface: float = 100.0
    alpha: float = 10.0
    mode: str = "signed"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if min(self.eikonal, self.surface, self.normal, self.offsurface) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class LossBreakdown:
    eikonal: float
    surface: float
    normal: float
    offsurface: float
    total: float


def eikonal_term(gradients: Value) -> Value:
    """Mean deviation of the gradient norm from one."""
    sq = dc.reduce_sum(dc.mul(gradients, gradients), axis=1)
    norms = dc.sqrt(sq)
    ones = Value(np.ones(norms.shape, dtype=norms.dtype))
    return dc.reduce_mean(dc.absolute(dc.sub(norms, ones)))


def surface_term(values: Value) -> Value:
    """Mean |value| over surface samples."""
    return dc.reduce_mean(dc.absolute(values))


def normal_term(gradients: Value, normals: np.ndarray, mode: str = "signed") -> Value:
    """Mean misalignment between field gradient and target normal.

    signed: 1 - <g, n>; otherwise 1 - |<g, n>| (the sign of the normal is
    ignored, for inputs where orientation is unreliable).
    """
    dots = dc.reduce_sum(dc.mul(gradients, Value(np.asarray(normals, dtype=np.float64))), axis=1)
    if mode != "signed":
        dots = dc.absolute(dots)
    ones = Value(np.ones(dots.shape, dtype=dots.dtype))
    return dc.reduce_mean(dc.sub(ones, dots))


def offsurface_term(values: Value, alpha: float, mode: str = "signed") -> Value:
    """Mean exp(-alpha |value|), or exp(-alpha value) in unsigned mode."""
    v = values if mode == "unsigned" else dc.absolute(values)
    return dc.reduce_mean(dc.exp(dc.scale(v, -float(alpha))))


def total_loss(field: Callable[[Value], Value], samples: SampleSet,
               weights: LossWeights) -> tuple[LossBreakdown, Value]:
    """Evaluate the full objective for a scalar field.

    ``field`` maps a tracked (s, 3) position Value to (s, 1) values; one
    evaluation covers all three sample classes and the spatial gradient is
    taken through it, so parameter gradients flow through both the values
    and their spatial derivatives.
    """
    s1 = samples.surface.shape[0]
    s2 = samples.offsurface_uniform.shape[0]
    s3 = samples.near_surface.shape[0]
    if s1 == 0:
        raise ValueError("sample set has no surface samples")
    if s2 + s3 == 0:
        raise ValueError("sample set has no off-surface samples")

    x = Value(samples.all_points, requires_grad=True)
    phi = field(x)
    if phi.shape not in ((s1 + s2 + s3, 1), (s1 + s2 + s3,)):
        raise ValueError(f"field returned shape {phi.shape} for {s1 + s2 + s3} samples")
    if phi.data.ndim == 1:
        phi = dc.reshape(phi, (phi.shape[0], 1))
    (gx,) = dc.grad(dc.reduce_sum(phi), [x])

    eik = eikonal_term(gx)
    surf = surface_term(dc.narrow(phi, 0, 0, s1))

    normal_weight = weights.normal
    if samples.surface_normals is None:
        if normal_weight > 0:
            warnings.warn("surface normals missing: normal term skipped")
        normal_weight = 0.0
        norm = Value(np.zeros(()))
    else:
        norm = normal_term(dc.narrow(gx, 0, 0, s1), samples.surface_normals, weights.mode)

    off = offsurface_term(dc.narrow(phi, 0, s1, s2 + s3), weights.alpha, weights.mode)

    for name, term in (("eikonal", eik), ("surface", surf), ("normal", norm), ("offsurface", off)):
        if not np.all(np.isfinite(term.data)):
            raise FloatingPointError(f"non-finite {name} loss term")

    total = dc.add(
        dc.add(dc.scale(eik, weights.eikonal), dc.scale(surf, weights.surface)),
        dc.add(dc.scale(norm, normal_weight), dc.scale(off, weights.offsurface)),
    )
    breakdown = LossBreakdown(
        eikonal=float(eik.data), surface=float(surf.data), normal=float(norm.data),
        offsurface=float(off.data), total=float(total.data),
    )
    return breakdown, total
