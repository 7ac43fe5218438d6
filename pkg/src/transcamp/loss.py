"""Joint graph loss: edge consistency plus absolute-pose supervision.

Predictions are raw ``[n, 7]`` tensors (quaternion then translation). The
rotation angle is scale invariant, so only the translation term normalizes
the quaternion part.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .geometry import Pose, pose_to_vec7
from .posegraph import GraphError, PoseGraph
from .tensor import Tensor


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    alpha_p: float = 1.0
    beta: float = 10.0
    beta_p: float = 10.0
    huber_delta_rot: float = 0.1
    huber_delta_trans: float = 0.5

    def __post_init__(self):
        ws = (self.alpha, self.alpha_p, self.beta, self.beta_p)
        if any(w < 0 for w in ws):
            raise LossConfigError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise LossConfigError("at least one loss weight must be positive")
        if self.huber_delta_rot <= 0 or self.huber_delta_trans <= 0:
            raise LossConfigError("Huber deltas must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise LossConfigError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


# quaternion algebra on [m, 4] tensors ---------------------------------------------

def _qmul_table() -> np.ndarray:
    # product coefficient of a_r * b_s in component c, flattened to [16, 4]
    C = np.zeros((4, 4, 4))
    rows = [
        [(0, 0, 1), (1, 1, -1), (2, 2, -1), (3, 3, -1)],
        [(0, 1, 1), (1, 0, 1), (2, 3, 1), (3, 2, -1)],
        [(0, 2, 1), (1, 3, -1), (2, 0, 1), (3, 1, 1)],
        [(0, 3, 1), (1, 2, 1), (2, 1, -1), (3, 0, 1)],
    ]
    for c, terms in enumerate(rows):
        for r, s, sign in terms:
            C[r, s, c] = sign
    return C.reshape(16, 4)


_QMUL = _qmul_table()
_CONJ = np.diag([1.0, -1.0, -1.0, -1.0])
_VEC_TO_Q = np.hstack([np.zeros((3, 1)), np.eye(3)])  # [3, 4]
_Q_TO_VEC = _VEC_TO_Q.T  # [4, 3]
_TAKE_Q = np.vstack([np.eye(4), np.zeros((3, 4))])  # [7, 4]
_TAKE_T = np.vstack([np.zeros((4, 3)), np.eye(3)])  # [7, 3]


def qmul(a: Tensor, b: Tensor) -> Tensor:
    m = a.shape[0]
    outer = a.reshape(m, 4, 1) * b.reshape(m, 1, 4)
    return outer.reshape(m, 16) @ Tensor(_QMUL)


def qconj(q: Tensor) -> Tensor:
    return q @ Tensor(_CONJ)


def qnormalize(q: Tensor) -> Tensor:
    return q / tc.sqrt((q * q).sum(axis=1, keepdims=True))


def qrotate(u: Tensor, v: Tensor) -> Tensor:
    """Rotate rows of ``v`` [m, 3] by unit quaternions ``u`` [m, 4]."""
    pv = v @ Tensor(_VEC_TO_Q)
    return qmul(qmul(u, pv), qconj(u)) @ Tensor(_Q_TO_VEC)


def split_pose(vec: Tensor) -> tuple[Tensor, Tensor]:
    return vec @ Tensor(_TAKE_Q), vec @ Tensor(_TAKE_T)


def as_pose_tensor(poses) -> Tensor:
    """Accept a tensor, an ``[n, 7]`` array or a sequence of :class:`Pose`."""
    if isinstance(poses, Tensor):
        return poses
    if isinstance(poses, np.ndarray):
        if poses.ndim != 2 or poses.shape[1] != 7:
            raise ValueError(f"pose array must be [n, 7], got {poses.shape}")
        return Tensor(poses.astype(np.float64))
    return Tensor(np.stack([pose_to_vec7(p) for p in poses]))


def _select(idx: Sequence[int], n: int) -> Tensor:
    S = np.zeros((len(idx), n))
    S[np.arange(len(idx)), idx] = 1.0
    return Tensor(S)


# loss terms ---------------------------------------------------------------------

def consistency_terms(graph: PoseGraph, pred, config: LossConfig) -> tuple[Tensor, Tensor]:
    """Summed robust rotation and translation discrepancies over edges (unweighted)."""
    if not graph.edges:
        return Tensor(0.0), Tensor(0.0)
    missing = [(e.src, e.dst) for e in graph.edges if not e.measured]
    if missing:
        raise GraphError(f"edges without a relative-pose measurement: {missing[:5]}")
    pred = as_pose_tensor(pred)
    n = pred.shape[0]
    src = [e.src for e in graph.edges]
    dst = [e.dst for e in graph.edges]
    meas = Tensor(np.stack([pose_to_vec7(e.rel_pose) for e in graph.edges]))
    q_meas, t_meas = split_pose(meas)

    q, t = split_pose(pred)
    qi, qj = _select(src, n) @ q, _select(dst, n) @ q
    ti, tj = _select(src, n) @ t, _select(dst, n) @ t

    rel_q = qmul(qj, qconj(qi))
    rot = tc.huber(tc.quat_angle(qmul(qconj(q_meas), rel_q)), config.huber_delta_rot).sum()

    u = qmul(qnormalize(qj), qconj(qnormalize(qi)))
    rel_t = tj - qrotate(u, ti)
    trans = tc.huber_norm(t_meas - rel_t, config.huber_delta_trans).sum()
    return rot, trans


def supervision_terms(graph: PoseGraph, pred, config: LossConfig) -> tuple[Tensor, Tensor]:
    """Summed robust rotation and translation errors over supervised nodes (unweighted)."""
    sup = [k for k, nd in enumerate(graph.nodes) if nd.gt_pose is not None]
    if not sup:
        return Tensor(0.0), Tensor(0.0)
    pred = as_pose_tensor(pred)
    gt = Tensor(np.stack([pose_to_vec7(graph.nodes[k].gt_pose) for k in sup]))
    q, t = split_pose(_select(sup, pred.shape[0]) @ pred)
    qg, tg = split_pose(gt)
    rot = tc.huber(tc.quat_angle(qmul(qconj(qg), q)), config.huber_delta_rot).sum()
    trans = tc.huber_norm(t - tg, config.huber_delta_trans).sum()
    return rot, trans


def consistency_loss(graph: PoseGraph, pred, config: LossConfig | None = None) -> Tensor:
    config = config or LossConfig()
    rot, trans = consistency_terms(graph, pred, config)
    return rot * config.alpha + trans * config.alpha_p


def supervision_loss(graph: PoseGraph, pred, config: LossConfig | None = None) -> Tensor:
    config = config or LossConfig()
    if config.beta == 0 and config.beta_p == 0:
        return Tensor(0.0)
    if all(nd.gt_pose is None for nd in graph.nodes):
        warnings.warn("no supervised node in graph; supervision term is zero", stacklevel=2)
        return Tensor(0.0)
    rot, trans = supervision_terms(graph, pred, config)
    return rot * config.beta + trans * config.beta_p


def graph_loss(graph: PoseGraph, pred, config: LossConfig | None = None) -> Tensor:
    config = config or LossConfig()
    total = Tensor(0.0)
    if config.alpha or config.alpha_p:
        total = total + consistency_loss(graph, pred, config)
    if config.beta or config.beta_p:
        total = total + supervision_loss(graph, pred, config)
    return total
