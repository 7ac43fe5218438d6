"""View-graph container: nodes, relative-pose edges and the adjacency tensor.

Every matched frame pair gets one edge record (``src < dst``) and two
adjacency entries, ``(i, j)`` and ``(j, i)``, whose correspondence tuples are
mirror images. Each entry carries a credibility score ``m`` in [0, 1]; the
diagonal entries are self-connections with ``m == 1``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, pose_to_vec7, vec7_to_pose

DEFAULT_PRUNE_THRESHOLD = 0.05


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: int
    x: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)
    gt_pose: Pose | None = None
    z: np.ndarray | None = None
    timestamp: int | None = None


@dataclass
class Edge:
    src: int
    dst: int
    rel_pose: Pose = field(default_factory=Pose.identity)
    q: np.ndarray | None = None
    # False until a relative-motion measurement is attached
    measured: bool = False


@dataclass(frozen=True)
class AdjacencyEntry:
    pairs: tuple[tuple[int, int], ...]
    m: float
    # correspondence-derived score at construction; attention updates rescale it
    prior: float

    def swapped(self) -> "AdjacencyEntry":
        return AdjacencyEntry(tuple((b, a) for a, b in self.pairs), self.m, self.prior)


_EMPTY = AdjacencyEntry((), 0.0, 0.0)
_SELF = AdjacencyEntry((), 1.0, 1.0)


@dataclass
class PoseGraph:
    nodes: list[Node]
    edges: list[Edge]
    adj: dict[tuple[int, int], AdjacencyEntry]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def feature_dim(self) -> int:
        return len(self.nodes[0].x) if self.nodes else 0

    def entry(self, i: int, j: int) -> AdjacencyEntry:
        if i == j:
            return self.adj.get((i, i), _SELF)
        return self.adj.get((i, j), _EMPTY)

    def edge(self, i: int, j: int) -> Edge | None:
        a, b = min(i, j), max(i, j)
        for e in self.edges:
            if e.src == a and e.dst == b:
                return e
        return None

    def edge_index(self) -> dict[tuple[int, int], Edge]:
        return {(e.src, e.dst): e for e in self.edges}

    def neighbors(self, i: int) -> list[int]:
        out = []
        for e in self.edges:
            if e.src == i:
                out.append(e.dst)
            elif e.dst == i:
                out.append(e.src)
        return sorted(out)

    def timestamps(self) -> list[int] | None:
        ts = [nd.timestamp for nd in self.nodes]
        return None if any(t is None for t in ts) else ts

    def gt_poses(self) -> list[Pose | None]:
        return [nd.gt_pose for nd in self.nodes]

    def set_meta(self, i: int, j: int, m: float) -> None:
        """Overwrite the credibility score of pair (i, j) in both directions."""
        if i == j:
            raise GraphError("self-connection scores are fixed at 1")
        m = float(min(max(m, 0.0), 1.0))
        for key in ((i, j), (j, i)):
            old = self.adj[key]
            self.adj[key] = AdjacencyEntry(old.pairs, m, old.prior)

    def copy(self) -> "PoseGraph":
        return copy.deepcopy(self)

    def validate(self) -> None:
        ids = [nd.id for nd in self.nodes]
        if ids != list(range(len(ids))):
            raise GraphError("node ids must be dense 0..n-1")
        dims = {len(nd.x) for nd in self.nodes}
        if len(dims) > 1:
            raise GraphError(f"feature dimensions differ across nodes: {sorted(dims)}")
        seen = set()
        for e in self.edges:
            if not (0 <= e.src < e.dst < self.n):
                raise GraphError(f"edge ({e.src}, {e.dst}) is not canonical or dangles")
            if (e.src, e.dst) in seen:
                raise GraphError(f"duplicate edge ({e.src}, {e.dst})")
            seen.add((e.src, e.dst))
        for (i, j), ent in self.adj.items():
            if not 0.0 <= ent.m <= 1.0:
                raise GraphError(f"m[{i},{j}] = {ent.m} outside [0, 1]")
            if i == j:
                if ent.m != 1.0:
                    raise GraphError(f"self-connection m[{i},{i}] must be 1")
                continue
            other = self.adj.get((j, i))
            if other is None or other != ent.swapped():
                raise GraphError(f"adjacency entries ({i},{j}) and ({j},{i}) are not mirror images")
            if (min(i, j), max(i, j)) not in seen:
                raise GraphError(f"adjacency entry ({i},{j}) has no edge")


def meta_score(pairs: Sequence, n_i: int, n_j: int) -> float:
    """Correspondence count normalized by the smaller feature set."""
    if n_i < 1 or n_j < 1:
        raise GraphError("feature counts must be positive")
    cap = min(n_i, n_j)
    if len(pairs) > cap:
        raise GraphError(f"{len(pairs)} correspondences exceed min feature count {cap}")
    return len(pairs) / cap


def build_graph(frames: Sequence, matches: Iterable) -> PoseGraph:
    """Assemble a :class:`PoseGraph` from frames and pairwise correspondences.

    ``frames`` holds ``(features, gt_pose_or_None, timestamp_or_None)`` tuples and
    ``matches`` holds ``(i, j, pairs)`` with ``pairs`` indexing features of ``i``
    and ``j`` respectively. Repeated pairs are merged.
    """
    nodes = []
    for k, fr in enumerate(frames):
        feats, gt, ts = (tuple(fr) + (None, None))[:3]
        x = np.asarray(feats, dtype=np.float64).reshape(-1)
        nodes.append(Node(id=k, x=x, gt_pose=gt, timestamp=None if ts is None else int(ts)))
    n = len(nodes)
    dims = {len(nd.x) for nd in nodes}
    if len(dims) > 1:
        raise GraphError(f"feature dimensions differ across frames: {sorted(dims)}")

    merged: dict[tuple[int, int], set[tuple[int, int]]] = {}
    for i, j, pairs in matches:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise GraphError(f"match ({i}, {j}) references a node outside 0..{n - 1}")
        if i == j:
            raise GraphError(f"match ({i}, {j}) is a self-match")
        tuples = [(int(a), int(b)) for a, b in pairs]
        if i > j:
            i, j = j, i
            tuples = [(b, a) for a, b in tuples]
        ni, nj = len(nodes[i].x), len(nodes[j].x)
        for a, b in tuples:
            if not (0 <= a < ni and 0 <= b < nj):
                raise GraphError(f"correspondence ({a}, {b}) on ({i}, {j}) outside feature range")
        merged.setdefault((i, j), set()).update(tuples)

    edges, adj = [], {}
    for k in range(n):
        adj[(k, k)] = _SELF
    for (i, j) in sorted(merged):
        pairs = tuple(sorted(merged[(i, j)]))
        if not pairs:
            continue
        m = meta_score(pairs, len(nodes[i].x), len(nodes[j].x))
        ent = AdjacencyEntry(pairs, m, m)
        adj[(i, j)] = ent
        adj[(j, i)] = ent.swapped()
        edges.append(Edge(i, j))
    return PoseGraph(nodes, edges, adj)


def attach_measurements(graph: PoseGraph, rel_poses: dict[tuple[int, int], Pose]) -> None:
    """Record measured relative motions, keyed by ``(i, j)`` meaning ``T_j inv(T_i)``."""
    index = graph.edge_index()
    for (i, j), p in rel_poses.items():
        if i > j:
            i, j, p = j, i, p.inverse()
        e = index.get((i, j))
        if e is None:
            raise GraphError(f"no edge ({i}, {j}) to attach a measurement to")
        e.rel_pose = p
        e.measured = True


def dense_meta(graph: PoseGraph) -> np.ndarray:
    n = graph.n
    M = np.eye(n)
    for e in graph.edges:
        M[e.src, e.dst] = M[e.dst, e.src] = graph.entry(e.src, e.dst).m
    return M


def prune_edges(graph: PoseGraph, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> PoseGraph:
    """Drop edges whose current score is below ``threshold``; returns a new graph."""
    if threshold < 0:
        raise GraphError("threshold must be non-negative")
    out = graph.copy()
    keep = []
    for e in out.edges:
        if out.entry(e.src, e.dst).m < threshold:
            del out.adj[(e.src, e.dst)]
            del out.adj[(e.dst, e.src)]
        else:
            keep.append(e)
    out.edges = keep
    return out


# dataset files ----------------------------------------------------------------

FRAMES_FILE = "frames.jsonl"
MATCHES_FILE = "matches.jsonl"
GT_FILE = "gt.jsonl"
META_FILE = "meta.json"


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from exc
    return records


def _pose_or_none(v) -> Pose | None:
    return None if v is None else vec7_to_pose(v)


def load_dataset(path) -> PoseGraph:
    """Read ``frames.jsonl`` and ``matches.jsonl`` from a dataset directory.

    A match record may carry an optional ``"rel_pose"`` 7-vector, the measured
    motion from ``i`` to ``j``.
    """
    path = Path(path)
    frames = _read_jsonl(path / FRAMES_FILE)
    frames.sort(key=lambda r: r["id"])
    ids = [r["id"] for r in frames]
    if ids != list(range(len(ids))):
        raise GraphError(f"{path / FRAMES_FILE}: ids must be dense 0..n-1")
    recs = _read_jsonl(path / MATCHES_FILE) if (path / MATCHES_FILE).exists() else []
    graph = build_graph(
        [(r["features"], _pose_or_none(r.get("gt_pose")), r.get("ts")) for r in frames],
        [(r["i"], r["j"], r["pairs"]) for r in recs],
    )
    meas = {(r["i"], r["j"]): vec7_to_pose(r["rel_pose"]) for r in recs if r.get("rel_pose") is not None}
    attach_measurements(graph, meas)
    return graph


def load_gt(path) -> list[Pose] | None:
    f = Path(path) / GT_FILE
    if not f.exists():
        return None
    recs = sorted(_read_jsonl(f), key=lambda r: r["id"])
    return [vec7_to_pose(r["pose"]) for r in recs]


def _fmt_vec(v) -> list[float]:
    return [float(x) for x in v]


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    os.replace(tmp, path)


def save_dataset(path, graph: PoseGraph, gt: Sequence[Pose] | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        path / FRAMES_FILE,
        (
            {
                "id": nd.id,
                "features": _fmt_vec(nd.x),
                "gt_pose": None if nd.gt_pose is None else _fmt_vec(pose_to_vec7(nd.gt_pose)),
                "ts": nd.timestamp,
            }
            for nd in graph.nodes
        ),
    )
    match_recs = []
    for e in graph.edges:
        rec = {"i": e.src, "j": e.dst, "pairs": [list(p) for p in graph.entry(e.src, e.dst).pairs]}
        if e.measured:
            rec["rel_pose"] = _fmt_vec(pose_to_vec7(e.rel_pose))
        match_recs.append(rec)
    write_jsonl(path / MATCHES_FILE, match_recs)
    if gt is not None:
        write_jsonl(path / GT_FILE, ({"id": k, "pose": _fmt_vec(pose_to_vec7(p))} for k, p in enumerate(gt)))
    if meta is not None:
        tmp = path / (META_FILE + ".tmp")
        tmp.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path / META_FILE)
