import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import compose as compose_oracle
from oracles import rot
from sdspp.world_model import (
    EdgeKind,
    FactorGraph,
    GraphError,
    Node,
    NodeKind,
    SemanticClass,
    SemanticInfo,
    check_information,
)

COV3 = np.eye(3) * 0.01
COV2 = np.eye(2) * 0.01


def cone(track):
    return SemanticInfo(SemanticClass.CONE, (0.5, 0.5), track)


def line(track, cls=SemanticClass.SOLID_LINE):
    return SemanticInfo(cls, None, track)


def graph_with_pose(pose):
    g = FactorGraph(origin=pose)
    pid = g.add_pose(0.0, (0, 0, 0), COV3)
    return g, pid


# ---------------------------------------------------------------- add_pose


def test_first_pose_at_origin():
    g = FactorGraph()
    pid = g.add_pose(0.0, (0, 0, 0), COV3)
    assert np.allclose(g.nodes[pid].pose, [0, 0, 0])
    assert not g.edges


def test_straight_composition():
    g = FactorGraph()
    g.add_pose(0.0, (0, 0, 0), COV3)
    pid = g.add_pose(1.0, (1, 0, 0), COV3)
    assert np.allclose(g.nodes[pid].pose, [1, 0, 0])
    (e,) = g.edges.values()
    assert e.kind is EdgeKind.ODOMETRY and np.allclose(e.information, np.linalg.inv(COV3))


def test_rotated_composition_matches_matrix_oracle():
    g, _ = graph_with_pose((0, 0, np.pi / 2))
    pid = g.add_pose(1.0, (1, 0, 0), COV3)
    assert np.allclose(g.nodes[pid].pose, [0, 1, np.pi / 2])
    assert np.allclose(g.nodes[pid].pose, compose_oracle(np.array([0, 0, np.pi / 2]), np.array([1, 0, 0])))


def test_add_pose_rejects_bad_input():
    g = FactorGraph()
    with pytest.raises(GraphError):
        g.add_pose(0.0, (0, 0, 0), np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(GraphError):
        g.add_pose(0.0, (0, 0, 0), [[1, 2, 0], [0, 1, 0], [0, 0, 1]])
    g.add_pose(1.0, (0, 0, 0), COV3)
    with pytest.raises(GraphError):
        g.add_pose(1.0, (1, 0, 0), COV3)


def test_check_information():
    assert np.array_equal(check_information(np.eye(2)), np.eye(2))
    with pytest.raises(GraphError):
        check_information(np.zeros((2, 2)))
    with pytest.raises(GraphError):
        check_information([[1.0, np.nan], [np.nan, 1.0]])


# ---------------------------------------------------------------- landmarks


def test_landmark_at_identity_pose():
    g, pid = graph_with_pose((0, 0, 0))
    lid = g.observe_landmark(pid, (3, 0), COV2, cone(7))
    assert np.allclose(g.nodes[lid].position, [3, 0])
    assert len(g.edges_of(lid, EdgeKind.LANDMARK)) == 1


def test_landmark_association_by_track():
    g, p0 = graph_with_pose((0, 0, 0))
    a = g.observe_landmark(p0, (3, 0), COV2, cone(7))
    p1 = g.add_pose(1.0, (1, 0, 0), COV3)
    b = g.observe_landmark(p1, (2, 0), COV2, cone(7))
    assert a == b
    assert len([n for n in g.nodes.values() if n.kind is NodeKind.LM]) == 1
    assert len(g.edges_of(a, EdgeKind.LANDMARK)) == 2


def test_landmark_rotated_pose():
    g, pid = graph_with_pose((0, 0, np.pi / 2))
    lid = g.observe_landmark(pid, (1, 0), COV2, cone(1))
    assert np.allclose(g.nodes[lid].position, rot(np.pi / 2) @ [1, 0])
    assert np.allclose(g.nodes[lid].position, [0, 1])


def test_landmark_errors():
    g, pid = graph_with_pose((0, 0, 0))
    with pytest.raises(GraphError):
        g.observe_landmark(99, (1, 0), COV2, cone(1))
    with pytest.raises(GraphError):
        g.observe_landmark(pid, (1, 0), -COV2, cone(1))
    lid = g.observe_landmark(pid, (1, 0), COV2, cone(1))
    with pytest.raises(GraphError):
        g.observe_landmark(lid, (1, 0), COV2, cone(2))  # not an AV node


def test_moving_vehicle_keeps_newest_observation_and_stamps_trail():
    g = FactorGraph(trail_rate_hz=2.0)
    sem = SemanticInfo(SemanticClass.MOVING_VEHICLE, (4.5, 1.8), 5, speed=3.0)
    pid = g.add_pose(0.0, (0, 0, 0), COV3)
    vid = g.observe_landmark(pid, (10, 0), COV2, sem, 0.0)
    for k in range(1, 9):
        pid = g.add_pose(k * 0.25, (0.75, 0, 0), COV3)
        g.observe_landmark(pid, (10, 0), COV2, sem, 0.0)
    assert len(g.edges_of(vid, EdgeKind.LANDMARK)) == 1
    assert np.allclose(g.nodes[vid].position, [16, 0])
    trail = [n for n in g.nodes.values()
             if n.semantics is not None and n.semantics.cls is SemanticClass.DRIVE_REGION]
    # stamps at t = 0, 0.5, 1.0, 1.5, 2.0
    assert len(trail) == 5
    assert [n.timestamp for n in trail] == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_trail_spacing_skips_stamps_near_existing_regions():
    g = FactorGraph(trail_rate_hz=4.0, trail_spacing=1.5)
    pid = g.add_pose(0.0, (0, 0, 0), COV3)
    for track in (1, 2):  # a second vehicle on the same path stamps nothing new
        for k in range(4):
            p = g.add_pose(0.25 * (4 * track + k), (0, 0, 0), COV3)
            g.observe_landmark(p, (10 + k, 0), COV2,
                               SemanticInfo(SemanticClass.MOVING_VEHICLE, (4.5, 1.8), track, speed=4.0), 0.0)
    trail = [n for n in g.nodes.values()
             if n.semantics is not None and n.semantics.cls is SemanticClass.DRIVE_REGION]
    xs = sorted(n.x for n in trail)
    assert xs == [10.0, 12.0]
    assert {n.semantics.track_id for n in trail} == {1}
    del pid


def test_stopped_vehicle_stamps_no_trail():
    g = FactorGraph()
    pid = g.add_pose(0.0, (0, 0, 0), COV3)
    g.observe_landmark(pid, (10, 0), COV2, SemanticInfo(SemanticClass.MOVING_VEHICLE, (4.5, 1.8), 5, speed=0.1))
    assert all(n.semantics.cls is not SemanticClass.DRIVE_REGION
               for n in g.nodes.values() if n.semantics is not None)


# ---------------------------------------------------------------- lines


def test_line_at_identity_pose():
    g, pid = graph_with_pose((0, 0, 0))
    pts = np.column_stack([np.arange(5.0), np.full(5, 1.75)])
    lid = g.observe_line(pid, pts, COV2, line(100))
    assert np.allclose(g.nodes[lid].points, pts)
    kinds = sorted(e.kind.value for e in g.edges_of(lid))
    assert kinds == ["line-consistency", "line-observation"]


def test_second_line_observation_keeps_one_consistency_edge():
    g, p0 = graph_with_pose((0, 0, 0))
    pts = np.column_stack([np.arange(5.0), np.full(5, 1.75)])
    lid = g.observe_line(p0, pts, COV2, line(100))
    p1 = g.add_pose(1.0, (1, 0, 0), COV3)
    assert g.observe_line(p1, pts, COV2, line(100)) == lid
    assert g.nodes[lid].x.size == 10
    assert len(g.edges_of(lid, EdgeKind.LINE_CONSISTENCY)) == 1
    assert len(g.edges_of(lid, EdgeKind.LINE)) == 2
    assert list(g.nodes[lid].segments) == [0] * 5 + [1] * 5


def test_line_translated_pose():
    g, pid = graph_with_pose((10, 0, 0))
    pts = np.column_stack([np.arange(5.0), np.full(5, 1.75)])
    lid = g.observe_line(pid, pts, COV2, line(100))
    assert np.allclose(g.nodes[lid].x, np.arange(10.0, 15.0))


def test_line_errors():
    g, pid = graph_with_pose((0, 0, 0))
    with pytest.raises(GraphError):
        g.observe_line(pid, [(0, 0), (1, 0), (2, 0)], COV2, line(1))
    with pytest.raises(GraphError):
        g.observe_line(42, [(0, 0), (1, 0), (2, 0), (3, 0)], COV2, line(1))


def test_node_invariants():
    with pytest.raises(GraphError):
        Node(0, NodeKind.LL, [0, 1, 2], [0, 0, 0])
    with pytest.raises(GraphError):
        SemanticInfo(SemanticClass.STATIC_OBSTACLE, (0.0, 1.0))
    n = Node(0, NodeKind.AV, 0, 0, theta=3 * np.pi)
    assert -np.pi < n.theta <= np.pi


# ---------------------------------------------------------------- window


def chain(n, rate=1.0, window=10.0):
    g = FactorGraph(window_duration=window)
    for k in range(n):
        g.add_pose(k / rate, (0 if k == 0 else 1, 0, 0), COV3)
    return g


def test_prune_nothing_inside_window():
    g = chain(10)
    assert g.prune_window(9.0) == 0


def test_prune_keeps_single_pose():
    g = chain(1)
    assert g.prune_window(20.0) == 0
    assert len(g.nodes) == 1


def test_prune_twelve_poses():
    g = chain(12)
    assert g.prune_window(12.0) == 2
    oldest = g.av_nodes()[0]
    assert oldest.timestamp == 2.0
    assert len(g.edges_of(oldest.id, EdgeKind.PRIOR)) == 1
    g.audit()


def test_prune_is_idempotent():
    g = chain(12)
    g.prune_window(12.0)
    n_nodes, n_edges = len(g.nodes), len(g.edges)
    assert g.prune_window(12.0) == 0
    assert (len(g.nodes), len(g.edges)) == (n_nodes, n_edges)


def test_prune_trims_line_points():
    g = FactorGraph(window_duration=2.0)
    pts = np.column_stack([np.arange(4.0), np.full(4, 1.75)])
    lid = None
    for k in range(4):
        pid = g.add_pose(float(k), (0 if k == 0 else 1, 0, 0), COV3)
        lid = g.observe_line(pid, pts, COV2, line(100))
    assert g.nodes[lid].x.size == 16
    g.prune_window(3.0)  # cutoff 1.0 drops the observation made at t = 0
    assert g.nodes[lid].x.size == 12
    assert np.all(g.nodes[lid].point_times >= 1.0)
    g.audit()
    g.prune_window(10.0)  # only the newest pose survives; the line goes with its points
    assert lid not in g.nodes
    g.audit()


# ---------------------------------------------------------------- properties


ops = st.lists(
    st.tuples(st.sampled_from(["pose", "lm", "line", "prune"]), st.integers(0, 4), st.floats(-5, 5)),
    min_size=1, max_size=40,
)


def replay(seq):
    g = FactorGraph(window_duration=3.0)
    t = 0.0
    pid = g.add_pose(t, (0, 0, 0), COV3)
    for op, track, val in seq:
        if op == "pose":
            t += 0.5
            pid = g.add_pose(t, (1.0, 0.1 * val, 0.01 * val), COV3)
        elif op == "lm":
            g.observe_landmark(pid, (5.0, val), COV2, cone(track))
        elif op == "line":
            xs = np.arange(4.0) + abs(val)
            g.observe_line(pid, np.column_stack([xs, np.full(4, val)]), COV2, line(100 + track))
        else:
            g.prune_window(t)
    return g


@given(ops)
def test_audit_holds_after_any_sequence(seq):
    g = replay(seq)
    g.audit()
    for e in g.edges.values():
        assert all(i in g.nodes for i in e.node_ids)


@given(ops)
def test_replay_is_deterministic_and_serialises(seq):
    a, b = replay(seq), replay(seq)
    buf_a, buf_b = io.StringIO(), io.StringIO()
    a.dump_jsonl(buf_a)
    b.dump_jsonl(buf_b)
    assert buf_a.getvalue() == buf_b.getvalue()
    c = FactorGraph.load_jsonl(io.StringIO(buf_a.getvalue()))
    buf_c = io.StringIO()
    c.dump_jsonl(buf_c)
    assert buf_c.getvalue() == buf_a.getvalue()


@given(ops, st.floats(0, 20))
def test_prune_idempotent_property(seq, extra):
    g = replay(seq)
    now = g.latest_pose().timestamp + extra
    g.prune_window(now)
    assert g.prune_window(now) == 0
    g.audit()


def test_find_track_cache_survives_pruning():
    g = FactorGraph(window_duration=1.0)
    p = g.add_pose(0.0, (0, 0, 0), COV3)
    first = g.observe_landmark(p, (3, 0), COV2, cone(9))
    for k in range(1, 5):
        p = g.add_pose(float(k), (1, 0, 0), COV3)
        g.prune_window(float(k))
    assert first not in g.nodes
    second = g.observe_landmark(p, (3, 0), COV2, cone(9))
    assert second != first and g.find_track(NodeKind.LM, 9).id == second


def test_jsonl_has_kind_tags():
    g, pid = graph_with_pose((0, 0, 0))
    g.observe_landmark(pid, (3, 0), COV2, cone(1))
    buf = io.StringIO()
    g.dump_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert all('"kind"' in ln for ln in lines[1:])
    with pytest.raises(GraphError):
        FactorGraph.load_jsonl(io.StringIO(lines[1] + "\n"))
