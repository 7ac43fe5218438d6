from __future__ import annotations

import numpy as np
import pytest

from transcamp.geometry import Pose, random_pose, relative_pose
from transcamp.posegraph import attach_measurements, build_graph
from transcamp.tensor import Tape, Tensor, backward


def numgrad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(x)``; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn(x)
        flat[k] = orig - h
        fm = fn(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def autograd(build, *arrays):
    """Gradients of scalar ``build(*tensors)`` with respect to each input array."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*ts)
    backward(tape, out)
    return out.item(), [t.grad for t in ts]


def max_rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_graph(rng, n: int, d_f: int = 6, p_edge: float = 0.5, timestamps: bool = True, connected: bool = True):
    """Random view graph with exact measurements from random ground truth."""
    gt = [Pose.identity()] + [random_pose(rng) for _ in range(n - 1)]
    matches, rel = [], {}
    for i in range(n):
        for j in range(i + 1, n):
            if (connected and j == i + 1) or rng.random() < p_edge:
                k = int(rng.integers(1, d_f + 1))
                pairs = [(int(a), int(b)) for a, b in zip(rng.permutation(d_f)[:k], rng.permutation(d_f)[:k])]
                matches.append((i, j, pairs))
                rel[(i, j)] = relative_pose(gt[i], gt[j])
    ts = list(rng.permutation(3 * n)[:n]) if timestamps else [None] * n
    frames = [(rng.normal(size=d_f), gt[k], None if ts[k] is None else int(ts[k])) for k in range(n)]
    graph = build_graph(frames, matches)
    attach_measurements(graph, rel)
    return graph, gt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
