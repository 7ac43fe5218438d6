"""The full pose network: embed -> L x (message passing + edge-featured encoder)
-> optional temporal encoder -> linear pose readout."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import Pose, vec7_to_pose
from .layers import (
    EmbedParams,
    EncoderParams,
    GraphInputs,
    LayerError,
    ReadoutParams,
    TemporalParams,
    embed_edges,
    embed_nodes,
    encoder_forward,
    readout,
    temporal_forward,
)
from .posegraph import PoseGraph
from .tensor import Tensor


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    d_ff: int = 128
    temporal: bool = True
    mpnn: bool = True

    def __post_init__(self):
        if self.n_heads * self.d_k != self.d_model:
            raise LayerError(
                f"n_heads * d_k = {self.n_heads * self.d_k} must equal d_model = {self.d_model}"
            )
        if self.n_layers < 0 or self.feature_dim < 1 or self.d_ff < 1:
            raise LayerError("layer count, feature dim and d_ff must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    vec: Tensor  # [n, 7] raw pose vectors
    Z: Tensor  # final node states
    q: Tensor  # final edge states
    weights: list[Tensor]  # per encoder layer, [N, n, n]

    def poses(self) -> list[Pose]:
        return [vec7_to_pose(v) for v in self.vec.data]


class PoseGraphTransformer:
    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        rng = np.random.default_rng(seed)
        d = dims.d_model
        self.embed = EmbedParams.init(rng, dims.feature_dim, d)
        self.layers = [
            EncoderParams.init(rng, d, dims.n_heads, dims.d_ff, prefix=f"enc{k}") for k in range(dims.n_layers)
        ]
        self.temporal = TemporalParams.init(rng, d, dims.n_heads, dims.d_ff) if dims.temporal else None
        self.head = ReadoutParams.init(rng, d)

    def parameters(self) -> list[Tensor]:
        ps = list(self.embed.tensors())
        for layer in self.layers:
            ps.extend(layer.tensors())
        if self.temporal is not None:
            ps.extend(self.temporal.tensors())
        ps.extend(self.head.tensors())
        return ps

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, graph: PoseGraph | GraphInputs) -> ForwardResult:
        inputs = graph if isinstance(graph, GraphInputs) else GraphInputs.from_graph(graph)
        if inputs.x.shape[1] != self.dims.feature_dim:
            raise LayerError(
                f"graph feature dim {inputs.x.shape[1]} does not match model feature dim {self.dims.feature_dim}"
            )
        Z = embed_nodes(inputs, self.embed)
        q = embed_edges(inputs, self.embed)
        weights = []
        for layer in self.layers:
            Z, q, w = encoder_forward(inputs, Z, q, layer, use_mpnn=self.dims.mpnn)
            weights.append(w)
        # the temporal layer is optional and skipped when any timestamp is missing
        if self.temporal is not None and inputs.timestamps is not None:
            Z = temporal_forward(Z, inputs.timestamps, self.temporal)
        return ForwardResult(readout(Z, self.head), Z, q, weights)

    def __call__(self, graph) -> ForwardResult:
        return self.forward(graph)
