"""Analytic-vs-central-difference gradient checks for every network component."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from .geometry import Pose, axis_angle_quat, random_pose, relative_pose
from .loss import LossConfig, graph_loss
from .model import ModelDims, PoseGraphTransformer
from .posegraph import attach_measurements, build_graph
from .tensor import Tape, Tensor, backward

FD_STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than REL_FLOOR * max(1, |f|) are compared on an absolute
# scale; below it central differences are dominated by roundoff in f
REL_FLOOR = 1e-6

COMPONENTS = ("embed", "mpnn", "encoder", "temporal", "readout", "loss", "end_to_end")
MAX_NODES = 8
MAX_DIM = 16


def rel_error(analytic: float, numeric: float, scale: float = 1.0) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR * max(1.0, abs(scale)))


def check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], rng: np.random.Generator,
          max_entries: int | None = 24, h: float = FD_STEP) -> float:
    """Max relative error of ``d fn / d wrt`` against central differences.

    ``fn`` builds a scalar from the current values of ``wrt``. At most
    ``max_entries`` randomly chosen entries per tensor are probed.
    """
    for t in wrt:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    f0 = out.item()
    analytic = [t.grad.copy() for t in wrt]
    worst = 0.0
    for t, g in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = fn().item()
            flat[k] = orig - h
            fm = fn().item()
            flat[k] = orig
            worst = max(worst, rel_error(g.reshape(-1)[k], (fp - fm) / (2 * h), f0))
    return worst


@dataclass
class Fixture:
    graph: object
    inputs: L.GraphInputs
    model: PoseGraphTransformer
    loss_config: LossConfig


def make_fixture(n: int = 5, d: int = 8, n_heads: int = 2, d_f: int = 6, seed: int = 0) -> Fixture:
    """Small random graph with noisy measurements, ground truth and timestamps."""
    rng = np.random.default_rng(seed)
    gt = [Pose.identity()] + [random_pose(rng) for _ in range(n - 1)]
    matches, rel = [], {}
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or rng.random() < 0.4:
                k = int(rng.integers(1, d_f + 1))
                pairs = [(int(a), int(b)) for a, b in zip(rng.permutation(d_f)[:k], rng.permutation(d_f)[:k])]
                matches.append((i, j, pairs))
                true = relative_pose(gt[i], gt[j])
                dq = axis_angle_quat(rng.normal(size=3), 0.3)
                rel[(i, j)] = Pose(true.omega, true.t).compose(Pose(dq, rng.normal(scale=0.3, size=3)))
    frames = [(rng.normal(size=d_f), gt[k], 10 + 3 * k) for k in range(n)]
    graph = build_graph(frames, matches)
    attach_measurements(graph, rel)
    # non-identity node poses so the pose input path is exercised
    for nd in graph.nodes:
        nd.pose = random_pose(rng, scale=0.5)
    # non-uniform scores
    for e in graph.edges:
        graph.set_meta(e.src, e.dst, float(rng.uniform(0.2, 1.0)))
    dims = ModelDims(feature_dim=d_f, n_layers=2, n_heads=n_heads, d_model=d, d_k=d // n_heads, d_ff=2 * d)
    model = PoseGraphTransformer(dims, seed=seed)
    # perturb offsets and gains away from their 0/1 initial values
    for p in model.parameters():
        if p.name.endswith(("_g", "_b", ".b1", ".b2", "b_in", "b_edge")):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return Fixture(graph, L.GraphInputs.from_graph(graph), model, LossConfig(huber_delta_rot=0.2, huber_delta_trans=0.5))


def component_checks(fx: Fixture, rng: np.random.Generator, max_entries: int = 24) -> dict[str, float]:
    """One max relative error per component, each isolated on its own parameters."""
    m, inp = fx.model, fx.inputs
    n, d = inp.n, m.dims.d_model
    proj = {k: rng.normal(size=s) for k, s in [("nd", (n, d)), ("n2d", (n, 2 * d)), ("nnd", (n, n, d)), ("n7", (n, 7))]}
    Z0 = Tensor(rng.normal(size=(n, d)))
    q0 = L.embed_edges(inp, m.embed)
    q0 = Tensor(q0.data)
    enc = m.layers[0]
    out: dict[str, float] = {}

    out["embed"] = check(
        lambda: (L.embed_nodes(inp, m.embed) * proj["nd"]).sum() + (L.embed_edges(inp, m.embed) * proj["nnd"]).sum(),
        m.embed.tensors(), rng, max_entries,
    )
    out["mpnn"] = check(lambda: (L.message_pass(inp.meta, Z0) * proj["n2d"]).sum(), [Z0], rng, max_entries)

    def enc_fn():
        Z, q, _ = L.encoder_forward(inp, Z0, q0, enc)
        return (Z * proj["nd"]).sum() + (q * proj["nnd"]).sum()

    out["encoder"] = check(enc_fn, enc.tensors() + [Z0, q0], rng, max_entries)
    if m.temporal is not None:
        out["temporal"] = check(
            lambda: (L.temporal_forward(Z0, inp.timestamps, m.temporal) * proj["nd"]).sum(),
            m.temporal.tensors() + [Z0], rng, max_entries,
        )
    out["readout"] = check(lambda: (L.readout(Z0, m.head) * proj["n7"]).sum(), m.head.tensors() + [Z0], rng, max_entries)

    vec = Tensor(m.forward(inp).vec.data.copy())
    out["loss"] = check(lambda: graph_loss(fx.graph, vec, fx.loss_config), [vec], rng, None)
    out["end_to_end"] = check(
        lambda: graph_loss(fx.graph, m.forward(inp).vec, fx.loss_config), m.parameters(), rng, max(4, max_entries // 4)
    )
    for t in m.parameters():
        t.grad = None
    return out


def parse_dims(text: str | None) -> dict:
    """``"n=5,d=8,heads=2"`` style overrides for :func:`make_fixture`."""
    dims = {"n": 5, "d": 8, "n_heads": 2, "d_f": 6, "seed": 0}
    if not text:
        return dims
    alias = {"N": "n_heads", "heads": "n_heads"}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, val = part.partition("=")
        key = alias.get(key.strip(), key.strip())
        if key not in dims:
            raise ValueError(f"unknown dimension {key!r}")
        dims[key] = int(val)
    if dims["n"] > MAX_NODES or dims["d"] > MAX_DIM:
        raise ValueError(f"gradient check is capped at n <= {MAX_NODES}, d <= {MAX_DIM}")
    if dims["n"] < 2 or dims["d"] % dims["n_heads"]:
        raise ValueError("need n >= 2 and heads dividing d")
    return dims


def run(dims: dict) -> dict[str, float]:
    fx = make_fixture(**dims)
    return component_checks(fx, np.random.default_rng(dims.get("seed", 0) + 1))


def passed(errors: dict[str, float]) -> bool:
    return all(math.isfinite(v) and v < TOLERANCE for v in errors.values())
