"""Graph-transformer building blocks on top of :mod:`transcamp.tensor`.

Everything is dense over node pairs: edge hidden states are an ``[n, n, d]``
tensor and attention is a masked softmax over each node's closed
neighbourhood (its edges plus the self-connection). Heads tile the hidden
dimension, so per-head projections are stored stacked as ``[d, d]`` matrices
whose row block ``k*d_k:(k+1)*d_k`` is head ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as tc
from .geometry import Pose, pose_to_vec7, vec7_to_pose
from .posegraph import PoseGraph, dense_meta
from .tensor import Tensor


class LayerError(ValueError):
    pass


def xavier(rng: np.random.Generator, fan_out: int, fan_in: int, name: str) -> Tensor:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-lim, lim, size=(fan_out, fan_in)), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


class _ParamGroup:
    """Dataclass mixin: iterate tensor fields in declaration order."""

    def tensors(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)]


# graph inputs -----------------------------------------------------------------

@dataclass
class GraphInputs:
    """Constant arrays extracted from a :class:`PoseGraph` for one forward pass."""

    x: np.ndarray  # [n, d_f]
    poses: np.ndarray  # [n, 7]
    meta: np.ndarray  # [n, n]
    mask: np.ndarray  # [n, n] closed neighbourhood
    edge_mask: np.ndarray  # [n, n] off-diagonal edges
    edge_vec: np.ndarray  # [n, n, 7] measured motion i -> j, zero off edges
    timestamps: list[int] | None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_graph(cls, graph: PoseGraph) -> "GraphInputs":
        n = graph.n
        x = np.stack([nd.x for nd in graph.nodes])
        poses = np.stack([pose_to_vec7(nd.pose) for nd in graph.nodes])
        edge_mask = np.zeros((n, n), dtype=bool)
        edge_vec = np.zeros((n, n, 7))
        for e in graph.edges:
            edge_mask[e.src, e.dst] = edge_mask[e.dst, e.src] = True
            edge_vec[e.src, e.dst] = pose_to_vec7(e.rel_pose)
            edge_vec[e.dst, e.src] = pose_to_vec7(e.rel_pose.inverse())
        mask = edge_mask | np.eye(n, dtype=bool)
        return cls(x, poses, dense_meta(graph), mask, edge_mask, edge_vec, graph.timestamps())

    def permuted(self, perm) -> "GraphInputs":
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        p = np.asarray(perm)
        ts = None if self.timestamps is None else [self.timestamps[k] for k in p]
        return GraphInputs(
            self.x[p],
            self.poses[p],
            self.meta[np.ix_(p, p)],
            self.mask[np.ix_(p, p)],
            self.edge_mask[np.ix_(p, p)],
            self.edge_vec[np.ix_(p, p)],
            ts,
        )


# embedding --------------------------------------------------------------------

@dataclass
class EmbedParams(_ParamGroup):
    W_in: Tensor  # [d, d_f + 7]
    b_in: Tensor  # [d]
    W_edge: Tensor  # [d, 7]
    b_edge: Tensor  # [d]
    self_edge: Tensor  # [d]

    @classmethod
    def init(cls, rng, d_f: int, d: int) -> "EmbedParams":
        return cls(
            xavier(rng, d, d_f + 7, "embed.W_in"),
            _zeros(d, "embed.b_in"),
            xavier(rng, d, 7, "embed.W_edge"),
            _zeros(d, "embed.b_edge"),
            Tensor(rng.uniform(-1, 1, size=d) / math.sqrt(d), requires_grad=True, name="embed.self_edge"),
        )


def embed_nodes(inputs: GraphInputs, p: EmbedParams) -> Tensor:
    """Project ``[features ++ pose 7-vector]`` of each node to the hidden size.

    No positional term: row ``i`` depends on node ``i`` alone.
    """
    if inputs.x.shape[1] + 7 != p.W_in.shape[1]:
        raise LayerError(
            f"node input width {inputs.x.shape[1]} + 7 does not match embedding {p.W_in.shape}"
        )
    xin = Tensor(np.concatenate([inputs.x, inputs.poses], axis=1))
    return xin @ p.W_in.T + p.b_in


def embed_edges(inputs: GraphInputs, p: EmbedParams) -> Tensor:
    """Initial edge states ``[n, n, d]``.

    An edge embeds both directed motions through a ReLU and averages them, so
    the state does not depend on which endpoint is stored as the source (a
    linear map would cancel the rotation axis, which flips sign under
    inversion). The diagonal holds the shared self-edge vector; non-edges
    stay zero.
    """
    n = inputs.n
    proj = tc.relu(Tensor(inputs.edge_vec) @ p.W_edge.T + p.b_edge)  # [n, n, d]
    sym = (proj + tc.transpose(proj, (1, 0, 2))) * 0.5
    emask = Tensor(inputs.edge_mask[..., None].astype(float))
    diag = Tensor(np.eye(n)[..., None])
    return sym * emask + diag * p.self_edge


# message passing --------------------------------------------------------------

def check_meta(meta: np.ndarray) -> None:
    if meta.ndim != 2 or meta.shape[0] != meta.shape[1]:
        raise LayerError(f"adjacency scores must be square, got {meta.shape}")
    if not np.array_equal(meta, meta.T):
        raise LayerError("adjacency scores are not symmetric")
    if np.any(meta < 0) or np.any(meta > 1):
        raise LayerError("adjacency scores outside [0, 1]")
    if np.any(np.diag(meta) != 1.0):
        raise LayerError("adjacency diagonal must be 1")


def message_pass(meta: np.ndarray, Z: Tensor) -> Tensor:
    """``[agg_i ++ Z_i]`` with ``agg_i`` the score-weighted mean over the closed neighbourhood."""
    check_meta(meta)
    W = meta / meta.sum(axis=1, keepdims=True)
    agg = Tensor(W) @ Z
    return tc.concat([agg, Z], axis=1)


# graph encoder ----------------------------------------------------------------

@dataclass
class EncoderParams(_ParamGroup):
    n_heads: int
    W_mp: Tensor  # [d, 2d]  message-passing output back to d
    Q: Tensor  # [d, d]  stacked Q_k
    K: Tensor
    V: Tensor
    E: Tensor
    O_Z: Tensor  # [d, d]
    O_e: Tensor  # [d, d]
    W1: Tensor  # [d_ff, d]
    b1: Tensor
    W2: Tensor  # [d, d_ff]
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    lne_g: Tensor
    lne_b: Tensor

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    def head(self, name: str, k: int) -> np.ndarray:
        """Row block of projection ``name`` belonging to head ``k``."""
        dk = self.d_k
        return getattr(self, name).data[k * dk:(k + 1) * dk]

    @classmethod
    def init(cls, rng, d: int, n_heads: int, d_ff: int, prefix: str = "enc") -> "EncoderParams":
        if d % n_heads:
            raise LayerError(f"{n_heads} heads do not tile hidden size {d}")
        return cls(
            n_heads,
            xavier(rng, d, 2 * d, f"{prefix}.W_mp"),
            xavier(rng, d, d, f"{prefix}.Q"),
            xavier(rng, d, d, f"{prefix}.K"),
            xavier(rng, d, d, f"{prefix}.V"),
            xavier(rng, d, d, f"{prefix}.E"),
            xavier(rng, d, d, f"{prefix}.O_Z"),
            xavier(rng, d, d, f"{prefix}.O_e"),
            xavier(rng, d_ff, d, f"{prefix}.W1"),
            _zeros(d_ff, f"{prefix}.b1"),
            xavier(rng, d, d_ff, f"{prefix}.W2"),
            _zeros(d, f"{prefix}.b2"),
            _ones(d, f"{prefix}.ln1_g"),
            _zeros(d, f"{prefix}.ln1_b"),
            _ones(d, f"{prefix}.ln2_g"),
            _zeros(d, f"{prefix}.ln2_b"),
            _ones(d, f"{prefix}.lne_g"),
            _zeros(d, f"{prefix}.lne_b"),
        )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, d = x.shape
    return tc.transpose(x.reshape(n, n_heads, d // n_heads), (1, 0, 2))  # [N, n, dk]


def _merge_heads(x: Tensor) -> Tensor:
    N, n, dk = x.shape
    return tc.transpose(x, (1, 0, 2)).reshape(n, N * dk)


def edge_attention(H: Tensor, q: Tensor, p: EncoderParams, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-head attention weights ``[N, n, n]`` and channel scores ``[n, n, d]``.

    The logit for head ``k`` on ``(i, j)`` is
    ``<Q_k h_i, (K_k h_j) * (E_k q_ij)> / sqrt(d_k)``; the softmax runs over
    ``j`` in the closed neighbourhood of ``i``.
    """
    if not np.all(np.diag(mask)):
        raise LayerError("every node needs a self-connection")
    n, d = H.shape
    N, dk = p.n_heads, p.d_k
    qh = H @ p.Q.T
    kh = H @ p.K.T
    eh = q @ p.E.T  # [n, n, d]
    scores = qh.reshape(n, 1, d) * kh.reshape(1, n, d) * eh * (1.0 / math.sqrt(dk))
    logits = tc.transpose(scores.reshape(n, n, N, dk).sum(axis=-1), (2, 0, 1))  # [N, n, n]
    return tc.softmax(logits, axis=-1, mask=mask[None]), scores


def _ffn(x: Tensor, W1, b1, W2, b2) -> Tensor:
    return tc.relu(x @ W1.T + b1) @ W2.T + b2


def encoder_forward(
    inputs: GraphInputs, Z: Tensor, q: Tensor, p: EncoderParams, use_mpnn: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """One graph-transformer layer. Returns ``(Z_next, q_next, weights)``.

    With ``use_mpnn=False`` the neighbourhood aggregate is replaced by the
    node's own state, i.e. the layer sees ``[Z_i ++ Z_i]``.
    """
    if Z.shape[1] != p.d:
        raise LayerError(f"hidden size {Z.shape[1]} does not match layer width {p.d}")
    Zhat = message_pass(inputs.meta, Z) if use_mpnn else tc.concat([Z, Z], axis=1)
    H = Zhat @ p.W_mp.T
    w, scores = edge_attention(H, q, p, inputs.mask)
    vh = _split_heads(H @ p.V.T, p.n_heads)
    att = _merge_heads(w @ vh) @ p.O_Z.T
    Z1 = tc.layer_norm(Z + att, p.ln1_g, p.ln1_b)
    Z2 = tc.layer_norm(Z1 + _ffn(Z1, p.W1, p.b1, p.W2, p.b2), p.ln2_g, p.ln2_b)

    sym = (scores + tc.transpose(scores, (1, 0, 2))) * 0.5
    cmask = Tensor(inputs.mask[..., None].astype(float))
    q_next = tc.layer_norm(q + sym @ p.O_e.T, p.lne_g, p.lne_b) * cmask
    return Z2, q_next, w


# temporal encoder -------------------------------------------------------------

@dataclass
class TemporalParams(_ParamGroup):
    n_heads: int
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @classmethod
    def init(cls, rng, d: int, n_heads: int, d_ff: int, prefix: str = "temporal") -> "TemporalParams":
        if d % n_heads:
            raise LayerError(f"{n_heads} heads do not tile hidden size {d}")
        return cls(
            n_heads,
            xavier(rng, d, d, f"{prefix}.Wq"),
            xavier(rng, d, d, f"{prefix}.Wk"),
            xavier(rng, d, d, f"{prefix}.Wv"),
            xavier(rng, d, d, f"{prefix}.Wo"),
            xavier(rng, d_ff, d, f"{prefix}.W1"),
            _zeros(d_ff, f"{prefix}.b1"),
            xavier(rng, d, d_ff, f"{prefix}.W2"),
            _zeros(d, f"{prefix}.b2"),
            _ones(d, f"{prefix}.ln1_g"),
            _zeros(d, f"{prefix}.ln1_b"),
            _ones(d, f"{prefix}.ln2_g"),
            _zeros(d, f"{prefix}.ln2_b"),
        )


def positional_encoding(timestamps, d: int) -> np.ndarray:
    pos = np.asarray(timestamps, dtype=np.float64)[:, None]
    i = np.arange(d)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rates[None, :]
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def temporal_forward(Z: Tensor, timestamps, p: TemporalParams) -> Tensor:
    """Pre-norm self-attention block over all nodes, positions from timestamps.

    Attention is unmasked, so the result does not depend on the order rows are
    stored in; only the timestamps enter through the positional encoding.
    """
    if timestamps is None or any(t is None for t in timestamps):
        raise LayerError("temporal layer needs a timestamp on every node")
    if len(set(timestamps)) != len(timestamps):
        raise LayerError("duplicate timestamps")
    n, d = Z.shape
    N = p.n_heads
    dk = d // N
    U = tc.layer_norm(Z, p.ln1_g, p.ln1_b) + Tensor(positional_encoding(timestamps, d))
    qh = _split_heads(U @ p.Wq.T, N)
    kh = _split_heads(U @ p.Wk.T, N)
    vh = _split_heads(U @ p.Wv.T, N)
    logits = (qh @ tc.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dk))
    w = tc.softmax(logits, axis=-1)
    Z1 = Z + _merge_heads(w @ vh) @ p.Wo.T
    return Z1 + _ffn(tc.layer_norm(Z1, p.ln2_g, p.ln2_b), p.W1, p.b1, p.W2, p.b2)


# readout ----------------------------------------------------------------------

IDENTITY_VEC7 = np.array([1.0, 0, 0, 0, 0, 0, 0])


@dataclass
class ReadoutParams(_ParamGroup):
    W: Tensor  # [7, d]
    b: Tensor  # [7]

    @classmethod
    def init(cls, rng, d: int) -> "ReadoutParams":
        # bias starts at the identity pose so initial predictions sit near it
        return cls(xavier(rng, 7, d, "readout.W"), Tensor(IDENTITY_VEC7.copy(), requires_grad=True, name="readout.b"))


def readout(Z: Tensor, p: ReadoutParams) -> Tensor:
    """Unconstrained pose 7-vectors ``[n, 7]``."""
    return Z @ p.W.T + p.b


def read_poses(Z: Tensor, p: ReadoutParams) -> list[Pose]:
    vec = readout(Z, p).data
    return [vec7_to_pose(v) for v in vec]


# adjacency update ---------------------------------------------------------------

def pair_attention(weights: list[Tensor] | list[np.ndarray], edge_mask: np.ndarray) -> np.ndarray:
    """Mean attention on each pair over layers, heads and both directions."""
    arrs = [w.data if isinstance(w, Tensor) else np.asarray(w) for w in weights]
    a = np.mean([x.mean(axis=0) for x in arrs], axis=0)
    a = 0.5 * (a + a.T)
    return np.where(edge_mask, a, 0.0)


def update_meta(graph: PoseGraph, weights) -> np.ndarray:
    """Rescale each edge's correspondence score by its attention and renormalize.

    ``m_ij <- prior_ij * a_ij``, then divided by the largest off-diagonal value
    so the best-attended pair scores 1. Writes into ``graph`` and returns the
    dense score matrix.
    """
    n = graph.n
    edge_mask = np.zeros((n, n), dtype=bool)
    for e in graph.edges:
        edge_mask[e.src, e.dst] = edge_mask[e.dst, e.src] = True
    a = pair_attention(weights, edge_mask)
    raw = np.zeros((n, n))
    for e in graph.edges:
        raw[e.src, e.dst] = graph.entry(e.src, e.dst).prior * a[e.src, e.dst]
    top = raw.max() if raw.size else 0.0
    for e in graph.edges:
        m = raw[e.src, e.dst] / top if top > 0 else 0.0
        graph.set_meta(e.src, e.dst, float(np.clip(m, 0.0, 1.0)))
    return dense_meta(graph)
