"""Plain SGD training with geometric learning-rate decay, between-epoch
adjacency updates and binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .evaluation import evaluate
from .layers import GraphInputs, update_meta
from .loss import LossConfig, graph_loss
from .model import ModelDims, PoseGraphTransformer
from .posegraph import PoseGraph, prune_edges
from .tensor import Tape, backward

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    loss: LossConfig = field(default_factory=LossConfig)
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    d_ff: int = 128
    prune_threshold: float = 0.05
    temporal_enabled: bool = True
    mpnn_enabled: bool = True
    rng_seed: int = 42
    checkpoint_every: int = 100
    grad_clip: float = 500.0

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs: must be an integer >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("lr_end/lr_start: need 0 < lr_end <= lr_start")
        if self.n_heads * self.d_k != self.d_model:
            raise ConfigError("n_heads * d_k must equal d_model")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every: must be >= 1")
        if self.prune_threshold < 0:
            raise ConfigError("prune_threshold: must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip: must be positive")

    def dims(self, feature_dim: int) -> ModelDims:
        return ModelDims(
            feature_dim=feature_dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_k=self.d_k,
            d_ff=self.d_ff,
            temporal=self.temporal_enabled,
            mpnn=self.mpnn_enabled,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d:
            if not isinstance(d["loss"], dict):
                raise ConfigError("loss: must be an object")
            try:
                d["loss"] = LossConfig.from_dict(d["loss"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"loss: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Geometric interpolation from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
    if config.epochs == 1:
        return config.lr_start
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    if epoch == config.epochs - 1:
        return config.lr_end
    frac = epoch / (config.epochs - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def _first_nonfinite(named) -> str | None:
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            return name
    return None


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    forward: object  # ForwardResult of the pre-update parameters


def train_step(model: PoseGraphTransformer, graph: PoseGraph, config: TrainConfig, lr: float,
               inputs: GraphInputs | None = None) -> StepResult:
    """Forward, backward and one clipped SGD update. Returns the pre-update loss."""
    params = model.parameters()
    model.zero_grad()
    with Tape() as tape:
        res = model.forward(inputs if inputs is not None else graph)
        loss = graph_loss(graph, res.vec, config.loss)
    value = loss.item()
    if not math.isfinite(value):
        bad = _first_nonfinite([("pose output", res.vec.data), ("node states", res.Z.data)])
        raise NonFiniteError(f"non-finite loss {value}; first non-finite tensor: {bad or 'loss'}")
    backward(tape, loss)
    bad = _first_nonfinite((p.name, p.grad) for p in params)
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}")
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    scale = config.grad_clip / norm if norm > config.grad_clip else 1.0
    for p in params:
        p.data -= (lr * scale) * p.grad
    bad = _first_nonfinite((p.name, p.data) for p in params)
    if bad:
        raise NonFiniteError(f"non-finite parameter {bad} after update")
    return StepResult(value, norm, res)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    n_edges: int
    median_rot_deg: float | None
    median_trans: float | None
    grad_norm: float


@dataclass
class RunResult:
    model: PoseGraphTransformer
    graph: PoseGraph
    log: list[EpochRecord]
    checkpoints: list[Path]


def train_run(
    graph: PoseGraph,
    config: TrainConfig,
    out_dir=None,
    model: PoseGraphTransformer | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> RunResult:
    """Train on one graph for ``config.epochs`` epochs (resuming at ``start_epoch``).

    After each step the adjacency scores are rescaled by the step's attention
    and weak edges are pruned; the next epoch sees the updated graph.
    """
    graph = graph.copy()
    if model is None:
        model = PoseGraphTransformer(config.dims(graph.feature_dim), seed=config.rng_seed)
    gt = graph.gt_poses()
    has_gt = all(p is not None for p in gt)
    records, ckpts = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_schedule(epoch, config)
        step = train_step(model, graph, config, lr)
        rot = trans = None
        if has_gt:
            rep = evaluate(step.forward.poses(), gt)
            rot, trans = rep.median_rot_deg, rep.median_trans
        rec = EpochRecord(epoch, step.loss, lr, len(graph.edges), rot, trans, step.grad_norm)
        records.append(rec)
        log.debug("epoch %d loss %.6g lr %.3g edges %d", epoch, step.loss, lr, len(graph.edges))
        if on_epoch is not None:
            on_epoch(rec)

        if graph.edges:
            update_meta(graph, step.forward.weights)
            graph = prune_edges(graph, config.prune_threshold)

        last = epoch == config.epochs - 1
        if out is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
            path = out / f"checkpoint_{epoch + 1:05d}.tcmp"
            checkpoint_save(model, path, epoch=epoch + 1, graph=graph)
            ckpts.append(path)
    return RunResult(model, graph, records, ckpts)


# checkpoints ------------------------------------------------------------------

MAGIC = b"TCMP"
FORMAT_VERSION = 1


def checkpoint_save(model: PoseGraphTransformer, path, epoch: int = 0, graph: PoseGraph | None = None) -> None:
    """Write ``model`` (and optionally the evolved adjacency scores) atomically.

    Layout, little-endian: magic ``TCMP``, u32 version, u32 header length,
    UTF-8 JSON header (dims, epoch, parameter names and shapes), the
    parameters as raw float64 in declaration order, then u32 ``n`` and an
    ``n x n`` float64 score matrix (``n = 0`` when no graph state is stored).
    """
    from .posegraph import dense_meta

    params = model.named_parameters()
    header = {
        "dims": model.dims.to_dict(),
        "epoch": int(epoch),
        "params": [[name, list(p.shape)] for name, p in params],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for _, p in params:
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    if graph is None:
        chunks.append(struct.pack("<I", 0))
    else:
        M = dense_meta(graph)
        chunks.append(struct.pack("<I", M.shape[0]))
        chunks.append(np.ascontiguousarray(M, dtype="<f8").tobytes())
    path = Path(path)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    model: PoseGraphTransformer
    epoch: int
    meta: np.ndarray | None


def checkpoint_load(path) -> Checkpoint:
    """Read a checkpoint; nothing is constructed unless the whole file parses."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = 12
    if off + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen
    arrays = []
    for name, shape in header["params"]:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64))
        off += nbytes
    if off + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated before graph state")
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = None
    if n:
        if off + 8 * n * n > len(raw):
            raise CheckpointError(f"{path}: truncated graph state")
        meta = np.frombuffer(raw, dtype="<f8", count=n * n, offset=off).reshape(n, n).copy()
        off += 8 * n * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")

    model = PoseGraphTransformer(ModelDims(**header["dims"]))
    named = model.named_parameters()
    if [n_ for n_, _ in named] != [n_ for n_, _ in header["params"]]:
        raise CheckpointError(f"{path}: parameter list does not match model dims")
    for (name, p), arr in zip(named, arrays):
        if p.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data = arr
    return Checkpoint(model, int(header["epoch"]), meta)


def apply_graph_state(graph: PoseGraph, meta: np.ndarray) -> PoseGraph:
    """Restore evolved scores; edges whose stored score is 0 were pruned."""
    if meta.shape != (graph.n, graph.n):
        raise CheckpointError(f"stored graph state is {meta.shape[0]} nodes, data has {graph.n}")
    out = graph.copy()
    for e in out.edges:
        out.set_meta(e.src, e.dst, float(meta[e.src, e.dst]))
    return prune_edges(out, np.nextafter(0.0, 1.0))
