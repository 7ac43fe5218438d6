import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transcamp.geometry import Pose, axis_angle_quat, pose_to_vec7, random_pose, rot_distance
from transcamp.loss import (
    LossConfig,
    LossConfigError,
    consistency_loss,
    graph_loss,
    supervision_loss,
)
from transcamp.posegraph import GraphError, attach_measurements, build_graph
from transcamp.synth import SceneSpec, generate
from transcamp.tensor import Tape, Tensor, backward

from conftest import numgrad, random_graph

ROT_ONLY = LossConfig(alpha=1, alpha_p=1, beta=0, beta_p=0, huber_delta_rot=0.1)


def vecs(poses):
    return np.stack([pose_to_vec7(p) for p in poses])


def two_node_graph(rel: Pose, gt=(None, None)):
    g = build_graph([(np.zeros(2), gt[0], 0), (np.zeros(2), gt[1], 1)], [(0, 1, [(0, 0)])])
    attach_measurements(g, {(0, 1): rel})
    return g


def huber(x, d):
    return 0.5 * x * x if abs(x) <= d else d * (abs(x) - 0.5 * d)


def matrix_oracle(graph, poses, cfg):
    """Consistency loss from 4x4 matrices: rel = T_j inv(T_i) against each measurement."""
    total = 0.0
    for e in graph.edges:
        M = poses[e.dst].matrix() @ np.linalg.inv(poses[e.src].matrix())
        rel = Pose.from_matrix(M)
        total += cfg.alpha * huber(rot_distance(e.rel_pose.omega, rel.omega), cfg.huber_delta_rot)
        total += cfg.alpha_p * huber(np.linalg.norm(e.rel_pose.t - rel.t), cfg.huber_delta_trans)
    return total


def test_consistent_predictions_give_zero(rng):
    g, gt = random_graph(rng, 6)
    assert abs(consistency_loss(g, vecs(gt)).item()) <= 1e-12
    assert abs(graph_loss(g, vecs(gt)).item()) <= 1e-12


def test_empty_edge_set():
    g = build_graph([(np.zeros(2), None, 0)], [])
    assert consistency_loss(g, vecs([Pose.identity()])).item() == 0.0


def test_unmeasured_edge_rejected():
    g = build_graph([(np.zeros(2), None, 0), (np.zeros(2), None, 1)], [(0, 1, [(0, 0)])])
    with pytest.raises(GraphError):
        consistency_loss(g, vecs([Pose.identity()] * 2))


def test_ninety_degree_edge_golden():
    g = two_node_graph(Pose(axis_angle_quat([0, 0, 1], math.pi / 2), np.zeros(3)))
    got = consistency_loss(g, vecs([Pose.identity()] * 2), ROT_ONLY).item()
    # Huber_0.1(pi/2) = 0.1 * (pi/2 - 0.05)
    assert got == pytest.approx(0.15207963267948966, abs=1e-12)


def test_supervision_golden():
    cfg = LossConfig(alpha=0, alpha_p=0, beta=0, beta_p=1, huber_delta_trans=1.0)
    g = two_node_graph(Pose.identity(), gt=(Pose.identity(), Pose.identity()))
    pred = [Pose.identity(), Pose(np.array([1.0, 0, 0, 0]), np.array([3.0, 4.0, 0.0]))]
    # Huber_1(5) = 5 - 0.5
    assert supervision_loss(g, vecs(pred), cfg).item() == pytest.approx(4.5, abs=1e-12)
    assert supervision_loss(g, vecs([Pose.identity()] * 2), cfg).item() == 0.0


def test_supervision_off_is_zero(rng):
    g, _ = random_graph(rng, 4)
    cfg = LossConfig(alpha=1, alpha_p=1, beta=0, beta_p=0)
    assert supervision_loss(g, vecs([random_pose(rng) for _ in range(4)]), cfg).item() == 0.0


def test_supervision_without_gt_warns():
    g = two_node_graph(Pose.identity())
    with pytest.warns(UserWarning):
        assert supervision_loss(g, vecs([Pose.identity()] * 2)).item() == 0.0


@pytest.mark.parametrize("kw", [dict(alpha=0, alpha_p=0, beta=0, beta_p=0), dict(alpha=-1), dict(huber_delta_rot=0)])
def test_config_validation(kw):
    with pytest.raises(LossConfigError):
        LossConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = LossConfig(alpha=2.0, huber_delta_trans=0.3)
    assert LossConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(LossConfigError):
        LossConfig.from_dict({"gamma": 1.0})


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, 5, p_edge=0.5)
    cfg = LossConfig(alpha=1.3, alpha_p=0.7, huber_delta_rot=0.2, huber_delta_trans=0.5)
    pred = [random_pose(rng) for _ in range(5)]
    got = consistency_loss(g, vecs(pred), cfg).item()
    assert got == pytest.approx(matrix_oracle(g, pred, cfg), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    g, _ = random_graph(rng, 5, p_edge=0.5)
    pred = [random_pose(rng) for _ in range(5)]
    S = random_pose(rng, scale=3.0)
    moved = [p.compose(S) for p in pred]
    a = consistency_loss(g, vecs(pred)).item()
    b = consistency_loss(g, vecs(moved)).item()
    assert abs(a - b) <= 1e-9


def test_quaternion_scale_does_not_change_loss(rng):
    g, _ = random_graph(rng, 4)
    v = vecs([random_pose(rng) for _ in range(4)])
    w = v.copy()
    w[:, :4] *= np.array([[2.0], [-0.5], [1.0], [3.0]])
    assert graph_loss(g, v).item() == pytest.approx(graph_loss(g, w).item(), rel=1e-12)


def test_gradient_against_central_differences(rng):
    g, gt = random_graph(rng, 5)
    v = vecs(gt) + rng.normal(scale=0.3, size=(5, 7))
    cfg = LossConfig(huber_delta_rot=0.2)
    t = Tensor(v.copy(), requires_grad=True)
    with Tape() as tape:
        loss = graph_loss(g, t, cfg)
    backward(tape, loss)
    fd = numgrad(lambda x: graph_loss(g, Tensor(x), cfg).item(), v.copy())
    err = np.max(np.abs(t.grad - fd) / np.maximum(np.maximum(np.abs(t.grad), np.abs(fd)), 1e-6))
    assert err < 1e-4


@pytest.mark.parametrize("trajectory", ["loop", "line", "random-walk"])
def test_zero_noise_scene_ground_truth_is_optimal(trajectory):
    scene = generate(SceneSpec(trajectory=trajectory, n_frames=12, rng_seed=7))
    assert abs(graph_loss(scene.graph, vecs(scene.gt)).item()) <= 1e-9
