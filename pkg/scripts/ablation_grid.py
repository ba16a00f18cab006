#!/usr/bin/env python3
"""Compare encoder ablations (graph conv / grid conv / interpolation mode)
on the sphere-overfit protocol with a fixed iteration budget.

Prints a small table of Chamfer distances against a dense analytic
sampling; the full configuration should come out ahead of the stripped one.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sdfenc.config import RunConfig, SampleCounts, TrainConfig
from sdfenc.decoder import DecoderConfig
from sdfenc.encoder import EncoderConfig
from sdfenc.geometry import PointCloud, sample_surface
from sdfenc.loss import LossWeights
from sdfenc.metrics import chamfer
from sdfenc.reconstruct import evaluate_dense, marching_cubes
from sdfenc.trainer import PreparedShape, train


def sphere_cloud(n=500, radius=0.5, seed=0) -> PointCloud:
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return PointCloud(radius * d, d)


def run_variant(graph_conv: bool, grid_conv: bool, interpolation: str,
                iterations: int, seed: int) -> float:
    cfg = RunConfig(
        encoder=EncoderConfig(resolutions=(4, 8, 16), features=16,
                              graph_conv=graph_conv, grid_conv=grid_conv,
                              grid_to_point=interpolation),
        decoder=DecoderConfig(),
        loss=LossWeights(),
        train=TrainConfig(iterations=iterations, seed=seed, batch_size=1),
        sampling=SampleCounts(surface=512, uniform=512, near=512),
    )
    cloud = sphere_cloud()
    ckpt, _ = train(cfg, [PreparedShape(cloud)])
    model = ckpt.build_model()
    mesh = marching_cubes(evaluate_dense(model, cloud, 48), 0.0)
    if len(mesh.triangles) == 0:
        return float("inf")
    pred, _ = sample_surface(mesh, 50_000, seed=1)
    rng = np.random.default_rng(2)
    d = rng.standard_normal((50_000, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return chamfer(pred, 0.5 * d)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    variants = [
        (True, True, "trilinear"),
        (True, False, "trilinear"),
        (False, True, "trilinear"),
        (False, False, "trilinear"),
        (True, True, "nearest"),
    ]
    print(f"{'graph':>6} {'grid':>5} {'interp':>10} {'chamfer':>10} {'time':>7}")
    for graph_conv, grid_conv, interp in variants:
        t0 = time.perf_counter()
        cd = run_variant(graph_conv, grid_conv, interp, args.iterations, args.seed)
        dt = time.perf_counter() - t0
        print(f"{str(graph_conv):>6} {str(grid_conv):>5} {interp:>10} "
              f"{cd:>10.5f} {dt:>6.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
