"""Synthetic camera trajectories with landmark-induced correspondences.

Cameras look along their +z axis. A landmark is visible when it lies inside a
60 degree half-angle cone and closer than twice the scene radius. Each camera
keeps at most ``feature_dim`` keypoints (visible landmarks in id order), and
two frames are matched on the landmarks they both keep.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, axis_angle_quat, qmul, random_quat, relative_pose
from .posegraph import PoseGraph, attach_measurements, build_graph, save_dataset

log = logging.getLogger(__name__)

TRAJECTORIES = ("loop", "line", "random-walk")
RADIUS = 5.0
CONE_HALF_ANGLE = np.deg2rad(60.0)
DESCRIPTOR_DIM = 16


class SpecError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 20
    trajectory: str = "loop"
    n_landmarks: int = 300
    feature_dim: int = 32
    noise_rotation_deg: float = 0.0
    noise_translation: float = 0.0
    match_noise_rate: float = 0.0
    rng_seed: int = 42
    # spurious edges injected after generation (see ``corrupt``)
    extra_outlier_edges: int = 0

    def __post_init__(self):
        errs = []
        if not isinstance(self.n_frames, int) or self.n_frames < 2:
            errs.append("n_frames: must be an integer >= 2")
        if self.trajectory not in TRAJECTORIES:
            errs.append(f"trajectory: must be one of {list(TRAJECTORIES)}")
        if not isinstance(self.n_landmarks, int) or self.n_landmarks < 1:
            errs.append("n_landmarks: must be a positive integer")
        if not isinstance(self.feature_dim, int) or self.feature_dim < 1:
            errs.append("feature_dim: must be a positive integer")
        if self.noise_rotation_deg < 0:
            errs.append("noise_rotation_deg: must be >= 0")
        if self.noise_translation < 0:
            errs.append("noise_translation: must be >= 0")
        if not 0.0 <= self.match_noise_rate <= 1.0:
            errs.append("match_noise_rate: must be in [0, 1]")
        if not isinstance(self.rng_seed, int) or not 0 <= self.rng_seed < 2**64:
            errs.append("rng_seed: must be a 64-bit unsigned integer")
        if not isinstance(self.extra_outlier_edges, int) or self.extra_outlier_edges < 0:
            errs.append("extra_outlier_edges: must be a non-negative integer")
        if errs:
            raise SpecError("; ".join(errs))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError("; ".join(f"{k}: unknown field" for k in sorted(unknown)))
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Scene:
    graph: PoseGraph
    gt: list[Pose]
    meta: dict = field(default_factory=dict)

    @property
    def outlier_edges(self) -> list[tuple[int, int]]:
        return [tuple(e) for e in self.meta.get("outlier_edges", [])]

    def write(self, path) -> None:
        save_dataset(Path(path), self.graph, self.gt, self.meta)


# trajectories ------------------------------------------------------------------

def look_at_pose(center, forward, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose of a camera at ``center`` looking along ``forward``."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    y = -np.asarray(up, dtype=np.float64)
    y = y - z * (y @ z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ np.asarray(center, dtype=np.float64)
    return Pose.from_matrix(M)


def _loop(n: int, rng) -> list[Pose]:
    poses = []
    for k in range(n):
        th = 2.0 * np.pi * k / n
        c = RADIUS * np.array([np.cos(th), np.sin(th), 0.0])
        poses.append(look_at_pose(c, -c))
    return poses


def _loop_landmarks(m: int, rng) -> np.ndarray:
    th = rng.uniform(0, 2 * np.pi, m)
    r = rng.uniform(1.3 * RADIUS, 1.8 * RADIUS, m)
    z = rng.uniform(-1.5, 1.5, m)
    return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)


def _line(n: int, rng):
    return [look_at_pose((0.8 * k, 0.0, 0.0), (0.0, 1.0, 0.0)) for k in range(n)]


def _line_landmarks(m: int, n: int, rng) -> np.ndarray:
    x = rng.uniform(-3.0, 0.8 * (n - 1) + 3.0, m)
    y = rng.uniform(3.0, 7.0, m)
    z = rng.uniform(-2.0, 2.0, m)
    return np.stack([x, y, z], axis=1)


def _random_walk(n: int, rng):
    poses, centers = [], []
    c = np.zeros(3)
    heading = 0.0
    for _ in range(n):
        fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
        poses.append(look_at_pose(c, fwd))
        centers.append((c.copy(), heading))
        heading += rng.normal(0.0, np.deg2rad(15.0))
        c = c + 0.5 * np.array([np.cos(heading), np.sin(heading), 0.0])
    return poses, centers


def _walk_landmarks(m: int, centers, rng) -> np.ndarray:
    pts = []
    for _ in range(m):
        c, h = centers[rng.integers(len(centers))]
        a = h + rng.uniform(-np.deg2rad(40), np.deg2rad(40))
        r = rng.uniform(3.0, 7.0)
        pts.append(c + np.array([r * np.cos(a), r * np.sin(a), rng.uniform(-1.5, 1.5)]))
    return np.array(pts)


# generation ----------------------------------------------------------------------

def visible(pose: Pose, landmarks: np.ndarray) -> np.ndarray:
    M = pose.matrix()
    pc = landmarks @ M[:3, :3].T + M[:3, 3]
    dist = np.linalg.norm(pc, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.arccos(np.clip(pc[:, 2] / dist, -1.0, 1.0))
    return np.flatnonzero((dist > 0) & (dist < 2.0 * RADIUS) & (ang < CONE_HALF_ANGLE))


def perturb(p: Pose, rot_deg: float, trans: float, rng) -> Pose:
    if rot_deg == 0 and trans == 0:
        return p
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.normal(0.0, rot_deg)) if rot_deg > 0 else 0.0
    dq = axis_angle_quat(axis, angle)
    dt = rng.normal(0.0, trans, size=3) if trans > 0 else np.zeros(3)
    return Pose(qmul(dq, p.omega), p.t + dt)


def components(n: int, edges) -> list[list[int]]:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for k in range(n):
        groups.setdefault(find(k), []).append(k)
    return sorted(groups.values())


def generate(spec: SceneSpec) -> Scene:
    """Build a scene deterministically from ``spec``; pose 0 is the identity."""
    rng = np.random.default_rng(spec.rng_seed)
    n = spec.n_frames
    if spec.trajectory == "loop":
        world = _loop(n, rng)
        landmarks = _loop_landmarks(spec.n_landmarks, rng)
    elif spec.trajectory == "line":
        world = _line(n, rng)
        landmarks = _line_landmarks(spec.n_landmarks, n, rng)
    else:
        world, centers = _random_walk(n, rng)
        landmarks = _walk_landmarks(spec.n_landmarks, centers, rng)

    descriptors = rng.normal(size=(spec.n_landmarks, DESCRIPTOR_DIM))
    proj = rng.normal(size=(spec.feature_dim, DESCRIPTOR_DIM)) / np.sqrt(DESCRIPTOR_DIM)

    keypoints = [visible(p, landmarks)[: spec.feature_dim] for p in world]
    features = []
    for kp in keypoints:
        s = descriptors[kp].sum(axis=0) / np.sqrt(max(len(kp), 1))
        features.append(proj @ s)

    inv0 = world[0].inverse()
    gt = [p.compose(inv0) for p in world]

    matches, rel = [], {}
    for i in range(n):
        pos_i = {lm: k for k, lm in enumerate(keypoints[i])}
        for j in range(i + 1, n):
            pairs = [(pos_i[lm], k) for k, lm in enumerate(keypoints[j]) if lm in pos_i]
            if not pairs:
                continue
            n_bad = int(round(spec.match_noise_rate * len(pairs)))
            if n_bad:
                for idx in rng.choice(len(pairs), size=n_bad, replace=False):
                    pairs[idx] = (int(rng.integers(len(keypoints[i]))), int(rng.integers(len(keypoints[j]))))
            matches.append((i, j, pairs))
            rel[(i, j)] = perturb(
                relative_pose(gt[i], gt[j]), spec.noise_rotation_deg, spec.noise_translation, rng
            )

    comps = components(n, [(i, j) for i, j, _ in matches])
    if len(comps) > 1:
        raise GenerationError(f"view graph is disconnected; components: {comps}")

    graph = build_graph([(features[k], gt[k], k) for k in range(n)], matches)
    attach_measurements(graph, rel)
    scene = Scene(graph, gt, {"spec": spec.to_dict(), "outlier_edges": []})
    if spec.extra_outlier_edges:
        scene = corrupt(scene, spec.extra_outlier_edges, spec.rng_seed + 1)
    return scene


def corrupt(scene: Scene, extra_outlier_edges: int, rng_seed: int) -> Scene:
    """Add spurious edges with random motions and a single correspondence each."""
    if extra_outlier_edges == 0:
        return scene
    rng = np.random.default_rng(rng_seed)
    graph = scene.graph.copy()
    n = graph.n
    present = {(e.src, e.dst) for e in graph.edges}
    free = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in present]
    if extra_outlier_edges > len(free):
        log.warning("only %d unconnected pairs available for %d outliers", len(free), extra_outlier_edges)
    picks = rng.choice(len(free), size=min(extra_outlier_edges, len(free)), replace=False)
    chosen = sorted(free[k] for k in picks)

    d_f = graph.feature_dim
    matches = [(e.src, e.dst, graph.entry(e.src, e.dst).pairs) for e in graph.edges]
    rel = {(e.src, e.dst): e.rel_pose for e in graph.edges if e.measured}
    for i, j in chosen:
        matches.append((i, j, [(int(rng.integers(d_f)), int(rng.integers(d_f)))]))
        rel[(i, j)] = Pose(random_quat(rng), rng.normal(0.0, RADIUS, size=3))
    frames = [(nd.x, nd.gt_pose, nd.timestamp) for nd in graph.nodes]
    out = build_graph(frames, matches)
    attach_measurements(out, rel)
    meta = dict(scene.meta)
    meta["outlier_edges"] = sorted([list(e) for e in scene.outlier_edges] + [[i, j] for i, j in chosen])
    return Scene(out, list(scene.gt), meta)
