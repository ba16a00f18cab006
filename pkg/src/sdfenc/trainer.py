"""End-to-end training: batching, per-iteration sampling, Adam, checkpoints.

Every random draw comes from a stream derived as default_rng([seed, tag,
iteration]) (shape streams use the shape index as tag), so runs are
bit-reproducible and resuming from a checkpoint replays the exact remaining
iterations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import RunConfig, run_config_from_dict, run_config_to_dict
from .container import Container, ContainerError, read_container, write_container
from .diffcore import ParamStore, backward
from .geometry import Box, NormalizationTransform, PointCloud, build_knn_graph, make_sample_set, perturb_along_normals
from .loss import LossBreakdown, total_loss
from .model import FieldModel

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOG_HEADER = ["iter", "eikonal", "surface", "normal", "offsurface", "total"]


class NonFiniteLossError(FloatingPointError):
    """Training aborted on a non-finite loss."""


@dataclass
class PreparedShape:
    """A normalized training cloud plus provenance."""

    cloud: PointCloud
    name: str = "shape"
    transform: NormalizationTransform | None = None


@dataclass
class AdamState:
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0

    @classmethod
    def init(cls, store: ParamStore) -> "AdamState":
        return cls(
            m={n: np.zeros(p.shape, dtype=store.dtype) for n, p in store.items()},
            v={n: np.zeros(p.shape, dtype=store.dtype) for n, p in store.items()},
        )


def adam_step(store: ParamStore, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update; parameters without gradients stay put
    except for moment decay."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros(p.shape, dtype=store.dtype)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for parameter {name!r}")
        g = g.astype(store.dtype, copy=False)
        m = state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    sq = 0.0
    for _, p in store.items():
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class Checkpoint:
    run_config: dict
    params: dict[str, Array]
    adam_m: dict[str, Array]
    adam_v: dict[str, Array]
    adam_steps: int
    seed: int
    iteration: int
    version: int = 1

    def build_model(self) -> FieldModel:
        cfg = run_config_from_dict(self.run_config)
        dtype = np.float32 if cfg.train.precision == "f32" else np.float64
        model = FieldModel.create(cfg.encoder, cfg.decoder, seed=self.seed, dtype=dtype)
        model.store.load_state_dict(self.params)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors: dict[str, Array] = {}
    for name, arr in ckpt.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in ckpt.adam_m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in ckpt.adam_v.items():
        tensors[f"adam.v.{name}"] = arr
    write_container(path, Container(
        config={"kind": "checkpoint", "run_config": ckpt.run_config},
        tensors=tensors,
        state={"seed": ckpt.seed, "iteration": ckpt.iteration, "adam_steps": ckpt.adam_steps},
    ))


def load_checkpoint(path) -> Checkpoint:
    c = read_container(path)
    if c.config.get("kind") != "checkpoint":
        raise ContainerError(f"not a checkpoint container: kind={c.config.get('kind')!r}")
    params, adam_m, adam_v = {}, {}, {}
    for name, arr in c.tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            raise ContainerError(f"unexpected tensor {name!r} in checkpoint")
    return Checkpoint(
        run_config=c.config["run_config"], params=params, adam_m=adam_m, adam_v=adam_v,
        adam_steps=int(c.state["adam_steps"]), seed=int(c.state["seed"]),
        iteration=int(c.state["iteration"]),
    )


def save_prepared_shape(path, shape: PreparedShape) -> None:
    tensors = {"positions": shape.cloud.positions}
    if shape.cloud.normals is not None:
        tensors["normals"] = shape.cloud.normals
    meta: dict = {"kind": "prepared_shape", "name": shape.name}
    if shape.transform is not None:
        meta["normalization"] = {
            "translation": list(shape.transform.translation),
            "scale": shape.transform.scale,
        }
    write_container(path, Container(config=meta, tensors=tensors, state={}))


def load_prepared_shape(path) -> PreparedShape:
    c = read_container(path)
    if c.config.get("kind") != "prepared_shape":
        raise ContainerError(f"not a prepared shape container: kind={c.config.get('kind')!r}")
    tf = None
    if "normalization" in c.config:
        tf = NormalizationTransform(
            translation=np.asarray(c.config["normalization"]["translation"]),
            scale=float(c.config["normalization"]["scale"]),
        )
    cloud = PointCloud(c.tensors["positions"], c.tensors.get("normals"))
    return PreparedShape(cloud=cloud, name=c.config.get("name", "shape"), transform=tf)


def _shape_iteration_rng(seed: int, shape_id: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, shape_id, iteration])


def train(cfg: RunConfig, shapes: list[PreparedShape], log_path=None,
          resume: Checkpoint | None = None, failure_path=None,
          progress=None) -> tuple[Checkpoint, list[LossBreakdown]]:
    """Run the optimization; returns the final checkpoint and per-iteration
    loss breakdowns (batch means).  On a non-finite loss the current state is
    saved to failure_path (if given) before raising."""
    if not shapes:
        raise ValueError("training needs at least one prepared shape")
    tcfg = cfg.train
    dtype = np.float32 if tcfg.precision == "f32" else np.float64
    cfg_dict = run_config_to_dict(cfg)

    model = FieldModel.create(cfg.encoder, cfg.decoder, seed=tcfg.seed, dtype=dtype)
    state = AdamState.init(model.store)
    start = 0
    if resume is not None:
        def _without_iterations(doc: dict) -> dict:
            out = {k: dict(v) for k, v in doc.items()}
            out["train"].pop("iterations", None)
            return out

        if _without_iterations(resume.run_config) != _without_iterations(cfg_dict):
            raise ValueError("resume checkpoint was produced by a different configuration")
        model.store.load_state_dict(resume.params)
        state = AdamState(m=dict(resume.adam_m), v=dict(resume.adam_v), step=resume.adam_steps)
        start = resume.iteration

    domain = Box.unit()
    # without input noise the encoder cloud is identical every iteration
    static_graphs = None
    if tcfg.noise_sigma == 0:
        static_graphs = [build_knn_graph(s.cloud.positions.astype(dtype), cfg.encoder.knn)
                         for s in shapes]
    log_rows: list[LossBreakdown] = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        if resume is None:
            writer.writerow(LOG_HEADER)

    def checkpoint_now(iteration: int) -> Checkpoint:
        return Checkpoint(
            run_config=cfg_dict, params=model.store.state_dict(),
            adam_m={n: a.copy() for n, a in state.m.items()},
            adam_v={n: a.copy() for n, a in state.v.items()},
            adam_steps=state.step, seed=tcfg.seed, iteration=iteration,
        )

    try:
        for it in range(start, tcfg.iterations):
            batch_rng = np.random.default_rng([tcfg.seed, len(shapes), it])
            take = min(tcfg.batch_size, len(shapes))
            batch = sorted(batch_rng.choice(len(shapes), size=take, replace=False).tolist())

            totals = []
            sums = np.zeros(5)
            for sid in batch:
                rng = _shape_iteration_rng(tcfg.seed, sid, it)
                cloud = shapes[sid].cloud
                positions = cloud.positions.astype(dtype)
                if tcfg.noise_sigma > 0:
                    positions = perturb_along_normals(
                        positions, cloud.normals, tcfg.noise_sigma, rng, domain).astype(dtype)
                    graph = build_knn_graph(positions, cfg.encoder.knn)
                else:
                    graph = static_graphs[sid]
                enc_cloud = PointCloud(positions, cloud.normals)
                samples = make_sample_set(
                    cloud, cfg.sampling.surface, cfg.sampling.uniform, cfg.sampling.near,
                    cfg.sampling.near_delta, rng, domain)
                try:
                    gv = model.encode(enc_cloud, graph=graph, rng=rng)
                    breakdown, total = total_loss(model.field_fn(gv), samples, cfg.loss)
                except FloatingPointError as exc:
                    if failure_path is not None:
                        save_checkpoint(failure_path, checkpoint_now(it))
                    raise NonFiniteLossError(str(exc)) from exc
                totals.append(total)
                sums += [breakdown.eikonal, breakdown.surface, breakdown.normal,
                         breakdown.offsurface, breakdown.total]

            batch_total = totals[0]
            for t in totals[1:]:
                batch_total = dc.add(batch_total, t)
            batch_total = dc.scale(batch_total, 1.0 / len(totals))
            if not np.isfinite(batch_total.data):
                if failure_path is not None:
                    save_checkpoint(failure_path, checkpoint_now(it))
                raise NonFiniteLossError(f"non-finite total loss at iteration {it}")

            model.store.zero_grad()
            backward(batch_total)
            clip_gradients(model.store, tcfg.clip_norm)
            adam_step(model.store, state, tcfg.lr)

            means = sums / len(batch)
            row = LossBreakdown(*means)
            log_rows.append(row)
            if writer is not None:
                writer.writerow([it, f"{row.eikonal:.9g}", f"{row.surface:.9g}",
                                 f"{row.normal:.9g}", f"{row.offsurface:.9g}",
                                 f"{row.total:.9g}"])
            if progress is not None:
                progress(it, row)
    finally:
        if log_file is not None:
            log_file.close()

    return checkpoint_now(tcfg.iterations), log_rows
