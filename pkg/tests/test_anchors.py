import math

import numpy as np
import pytest

from netloc.anchors import (
    AlignmentError,
    AnchorError,
    AnchorSet,
    Trajectory,
    align_to_global,
    apply_anchor_weights,
    boost_candidates,
    kabsch,
    match_tracks,
    register_virtual_anchors,
    trajectory_similarity,
)
from netloc.edge_select import build_mst, make_candidate
from netloc.sim import candidate_pairs
from netloc.topology import Measurement, Position, Topology

from conftest import make_scenario

T = np.arange(0, 46.0, 0.5)


def line(velocity, start=(0, 0, 0), node=0):
    return Trajectory(node, T, np.asarray(start, float) + np.outer(T, velocity))


def test_similarity_examples():
    a = line((1.0, 0.5, 0))
    assert trajectory_similarity(a, a, 45) == pytest.approx(1.0)
    assert trajectory_similarity(a, line((-1.0, -0.5, 0)), 45) == pytest.approx(-1.0)
    assert trajectory_similarity(a, line((0.5, 0.25, 0)), 45) == pytest.approx(0.5)


def test_similarity_stationary_rules():
    still = line((0, 0, 0))
    assert trajectory_similarity(still, still, 45) == 1.0
    assert trajectory_similarity(still, line((1, 0, 0)), 45) == 0.0


def test_similarity_needs_overlap():
    with pytest.raises(AnchorError, match="insufficient overlap"):
        trajectory_similarity(line((1, 0, 0)), line((1, 0, 0)), 60)


def test_trajectory_validation_and_round_trip():
    with pytest.raises(AnchorError):
        Trajectory(0, [0.0, 0.0], np.zeros((2, 3)))
    a = line((1, 2, 0))
    b = Trajectory.from_dict(a.to_dict())
    np.testing.assert_array_equal(a.samples, b.samples)


def wiggle(node, phase):
    x = np.column_stack([T, 3 * np.sin(T / 4 + phase), np.zeros_like(T)])
    return Trajectory(node, T, x)


def test_identical_track_registers_node():
    nodes = {k: wiggle(k, k) for k in range(5)}
    got = match_tracks(nodes, {100: wiggle(100, 3)}, 0.9, 45)
    assert got == {100: (3, pytest.approx(1.0))}
    anchors = register_virtual_anchors(nodes, {100: wiggle(100, 3)}, 0.9, 45)
    assert anchors.ids() == [3]
    np.testing.assert_allclose(anchors.positions()[3].as_array(), wiggle(0, 3).samples[-1])


def test_lockstep_nodes_are_ambiguous():
    nodes = {0: line((1, 0, 0)), 1: line((1, 0, 0), start=(0, 3, 0)), 2: line((0, 1, 0))}
    assert match_tracks(nodes, {50: line((1, 0, 0))}, 0.9, 45) == {}


def test_higher_threshold_never_registers_more():
    rng = np.random.default_rng(0)
    nodes = {k: wiggle(k, rng.uniform(0, 6)) for k in range(8)}
    tracks = {100 + k: Trajectory(100 + k, T, nodes[k].samples + rng.normal(0, 0.3, nodes[k].samples.shape)) for k in range(4)}
    counts = [len(match_tracks(nodes, tracks, th, 45)) for th in (0.3, 0.5, 0.7, 0.9, 0.99)]
    assert counts == sorted(counts, reverse=True)


def test_anchor_set_rules():
    with pytest.raises(AnchorError):
        AnchorSet({1: Position(0, 0, 0)}, {1: (Position(0, 0, 0), 0.5)})
    with pytest.raises(AnchorError):
        AnchorSet({}, {1: (Position(0, 0, 0), 1.5)})
    s = AnchorSet({2: Position(1, 1, 1)}).with_virtual({0: (Position(0, 0, 0), 0.9)})
    assert s.ids() == [0, 2] and len(s) == 2


def test_apply_anchor_weights():
    t = Topology.build(3, [Measurement(0, 1, 1.0), Measurement(1, 2, 1.0), Measurement(2, 1, 1.0, angle_valid=False)])
    same = apply_anchor_weights(t, {0: Position(0, 0, 0)}, boost=1)
    np.testing.assert_array_equal(same.arrays.w_range, t.arrays.w_range)
    b = apply_anchor_weights(t, {2: Position(0, 0, 0)}, boost=10)
    assert b.arrays.w_range.tolist() == [1.0, 10.0, 10.0]
    assert b.arrays.w_angle.tolist() == [1.0, 10.0, 0.0]
    assert 2 in b.anchors
    with pytest.raises(AnchorError):
        apply_anchor_weights(t, {7: Position(0, 0, 0)})
    with pytest.raises(AnchorError):
        apply_anchor_weights(t, {0: Position(0, 0, 0)}, boost=0.5)


def test_boost_scales_selection_weight():
    c = [make_candidate(0, 1, 10.0, True, 0.1), make_candidate(1, 2, 10.0, True, 0.1)]
    out = boost_candidates(c, [0], 10)
    assert out[0].weight == pytest.approx(c[0].weight * 0.1)
    assert out[1].weight == c[1].weight


@pytest.mark.parametrize("seed", range(20))
def test_boost_never_lowers_anchor_degree(seed):
    s = make_scenario(25, seed=seed, bounds=(40.0, 40.0, 5.0))
    P = s.positions
    c = [make_candidate(i, j, float(np.linalg.norm(P[i] - P[j])), True, 1.0) for i, j in candidate_pairs(s)]
    anchor = int(s.anchor_order[0])

    def degree(tree):
        return sum(anchor in p for p in tree.pairs)

    assert degree(build_mst(boost_candidates(c, [anchor], 10), 25)) >= degree(build_mst(c, 25))


def yaw_rotation(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def test_alignment_examples():
    rng = np.random.default_rng(3)
    truth = rng.uniform(0, 20, (8, 3))
    anchors = {k: Position.from_array(truth[k]) for k in (0, 3, 5)}
    flat, res, R = align_to_global(truth + [5, -2, 1], anchors)
    np.testing.assert_allclose(flat.reshape(-1, 3), truth, atol=1e-12)
    assert res < 1e-12
    rotated = truth @ yaw_rotation(30).T
    flat, res, _ = align_to_global(rotated, anchors)
    assert res < 1e-9
    np.testing.assert_allclose(flat.reshape(-1, 3), truth, atol=1e-9)
    flat, res, R = align_to_global(rotated, {2: Position.from_array(truth[2])})
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_allclose(flat.reshape(-1, 3)[2], truth[2])


def test_alignment_errors():
    truth = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    collinear = {k: Position.from_array(truth[k]) for k in range(3)}
    with pytest.raises(AlignmentError):
        align_to_global(truth, collinear, mode="full")
    with pytest.raises(AlignmentError):
        align_to_global(truth, {})
    # collinear anchors fall back to yaw alignment in auto mode
    _, res, _ = align_to_global(truth @ yaw_rotation(40).T, collinear)
    assert res < 1e-9


def test_kabsch_reflection_flag():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(6, 3))
    B = A * [1, 1, -1]
    R, _ = kabsch(A, B)
    assert np.linalg.det(R) == pytest.approx(1.0)
    R2, t2 = kabsch(A, B, allow_reflection=True)
    np.testing.assert_allclose(A @ R2.T + t2, B, atol=1e-12)
