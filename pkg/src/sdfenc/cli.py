"""Command line interface.

Subcommands: prepare, train, reconstruct, sdf, eval, info.
Exit codes: 0 success, 1 usage, 2 parse/config error, 3 geometry error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, run_config_from_dict
from .container import ContainerError
from .geometry import (
    GeometryError,
    ParseError,
    PointCloud,
    TriangleMesh,
    load_geometry,
    normalize_to_unit_box,
    sample_surface,
)
from .metrics import evaluate_pair
from .model import FieldModel
from .reconstruct import evaluate_dense, export_mesh, marching_cubes
from .trainer import (
    NonFiniteLossError,
    PreparedShape,
    load_checkpoint,
    load_prepared_shape,
    save_checkpoint,
    save_prepared_shape,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_GEOMETRY = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_cloud(path, normalize: bool) -> PointCloud:
    path = Path(path)
    if path.suffix == ".zlse":
        cloud = load_prepared_shape(path).cloud
    else:
        geom = load_geometry(path)
        if isinstance(geom, TriangleMesh):
            raise GeometryError(f"{path}: expected a point cloud, got a mesh "
                                "(run 'prepare' first)")
        cloud = geom
    if normalize:
        cloud, _ = normalize_to_unit_box(cloud)
    return cloud


def cmd_prepare(args) -> int:
    geom = load_geometry(args.input)
    tf = None
    if args.normalize:
        geom, tf = normalize_to_unit_box(geom)
    if isinstance(geom, TriangleMesh):
        pts, nrm = sample_surface(geom, args.surface_samples, args.seed)
        cloud = PointCloud(pts, nrm)
    else:
        cloud = geom
        if args.surface_samples and args.surface_samples < len(cloud):
            idx = np.sort(np.random.default_rng(args.seed).choice(
                len(cloud), size=args.surface_samples, replace=False))
            cloud = PointCloud(cloud.positions[idx],
                               None if cloud.normals is None else cloud.normals[idx])
    shape = PreparedShape(cloud=cloud, name=Path(args.input).stem, transform=tf)
    save_prepared_shape(args.output, shape)
    print(f"prepared {len(cloud)} points -> {args.output}")
    return EXIT_OK


def _load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config) if args.config else RunConfig()
    data = Path(args.data)
    if data.is_dir():
        files = sorted(data.glob("*.zlse"))
        if not files:
            raise GeometryError(f"no prepared shapes (*.zlse) in {data}")
    else:
        files = [data]
    shapes = [load_prepared_shape(f) for f in files]
    resume = load_checkpoint(args.resume) if args.resume else None
    log_path = args.log or (str(args.out) + ".loss.csv")

    t0 = time.perf_counter()
    last = [0]

    def progress(it, row):
        last[0] = it
        if args.verbose and (it % 50 == 0 or it + 1 == cfg.train.iterations):
            print(f"iter {it}: total {row.total:.6g}", flush=True)

    try:
        ckpt, _ = train(cfg, shapes, log_path=log_path, resume=resume,
                        failure_path=str(args.out) + ".failed", progress=progress)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc} (state saved to {args.out}.failed)",
              file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(args.out, ckpt)
    print(f"trained {cfg.train.iterations} iterations in "
          f"{time.perf_counter() - t0:.1f}s -> {args.out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    cloud = _load_cloud(args.input, args.normalize)
    t0 = time.perf_counter()
    field = evaluate_dense(model, cloud, args.resolution, chunk_size=args.chunk_size)
    t_eval = time.perf_counter() - t0
    mesh = marching_cubes(field, args.iso)
    t_total = time.perf_counter() - t0
    export_mesh(mesh, args.output)
    print(f"evaluated {args.resolution}^3 = {args.resolution ** 3} cells in {t_eval:.2f}s; "
          f"extracted {len(mesh.triangles)} triangles in {t_total:.2f}s -> {args.output}")
    if len(mesh.triangles) == 0:
        print("warning: no level-set crossings; mesh is empty", file=sys.stderr)
    return EXIT_OK


def cmd_sdf(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    cloud = _load_cloud(args.input, args.normalize)
    queries = load_geometry(args.queries, fmt="xyz").positions
    gv = model.encode(cloud)
    values = model.evaluate(gv, queries)
    out = "\n".join(f"{v:.9g}" for v in values) + "\n"
    if args.output:
        Path(args.output).write_text(out)
    else:
        sys.stdout.write(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_geometry(args.pred)
    gt = load_geometry(args.gt)
    report = evaluate_pair(pred, gt, samples=args.samples, seed=args.seed,
                           repeats=args.repeats, squared=args.squared)
    print(report.to_json())
    return EXIT_OK


def cmd_info(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt).build_model()
    elif args.config:
        cfg = _load_run_config(args.config)
        model = FieldModel.create(cfg.encoder, cfg.decoder, seed=cfg.train.seed)
    else:
        model = FieldModel.create(RunConfig().encoder, RunConfig().decoder)
    counts = model.store.count_by_prefix()
    for prefix in sorted(counts):
        print(f"{prefix} {counts[prefix]}")
    print(f"total {model.store.total_count}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sdfenc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="normalize and sample a shape for training")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--surface-samples", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on prepared shapes")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh from a trained field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--output", required=True)
    p.add_argument("--chunk-size", type=int, default=65536)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sdf", help="evaluate the field at query points")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("eval", help="Chamfer / normal consistency between surfaces")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--squared", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", help="parameter counts per module")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return code
    except (ParseError, ConfigError, ContainerError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except GeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
