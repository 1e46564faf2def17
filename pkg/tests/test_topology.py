import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netloc.topology import (
    NLOS,
    Measurement,
    Position,
    Topology,
    TopologyError,
    add_measurement,
    dumps_topology,
    load_topology,
    reciprocal_pairs,
    save_topology,
    topology_from_dict,
    topology_to_dict,
    undirected_edges,
    wrap_angle,
)


def test_add_to_empty_topology():
    t = add_measurement(Topology.build(2), Measurement(0, 1, 5.0, 0.1, 0.0))
    assert len(t.measurements) == 1


def test_self_edge_rejected():
    with pytest.raises(TopologyError, match="self-edge"):
        Measurement(0, 0, 1.0)


def test_readding_replaces():
    t = add_measurement(Topology.build(2), Measurement(0, 1, 5.0))
    t = add_measurement(t, Measurement(0, 1, 6.0))
    assert [m.range for m in t.measurements] == [6.0]


def test_out_of_range_node():
    with pytest.raises(TopologyError):
        add_measurement(Topology.build(2), Measurement(0, 2, 1.0))


@pytest.mark.parametrize("bad", [dict(range=-1.0), dict(range=math.nan), dict(elevation=2.0), dict(los="fog")])
def test_invalid_measurement(bad):
    kw = dict(src=0, dst=1, range=1.0)
    kw.update(bad)
    with pytest.raises(TopologyError):
        Measurement(**kw)


def test_reciprocal_pairs_counts():
    one = Topology.build(2, [Measurement(0, 1, 1.0)])
    assert reciprocal_pairs(one) == []
    two = Topology.build(2, [Measurement(0, 1, 1.0), Measurement(1, 0, 1.0)])
    assert len(reciprocal_pairs(two)) == 1
    full = Topology.build(3, [Measurement(i, j, 1.0) for i in range(3) for j in range(3) if i != j])
    assert len(reciprocal_pairs(full)) == 3
    assert undirected_edges(full) == [(0, 1), (0, 2), (1, 2)]


def test_weights_default_and_invalid_angles_zeroed():
    t = Topology.build(2, [Measurement(0, 1, 1.0), Measurement(1, 0, 1.0, angle_valid=False)])
    a = t.arrays
    assert a.w_range.tolist() == [1.0, 1.0]
    assert a.w_angle.tolist() == [1.0, 0.0]


def test_wrap_angle_half_open():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


measurements = st.builds(
    Measurement,
    src=st.integers(0, 4),
    dst=st.integers(5, 7),
    range=st.floats(0, 100),
    azimuth=st.floats(-3.14, 3.14),
    elevation=st.floats(-1.5, 1.5),
    angle_valid=st.booleans(),
    los=st.sampled_from(["LOS", NLOS]),
    sigma_los=st.floats(0, 5),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(measurements, max_size=12))
def test_serialization_round_trip(ms):
    t = Topology.build(8, ms, {0: Position(1.0, 2.0, 3.0)})
    back = topology_from_dict(topology_to_dict(t))
    assert back.measurements == t.measurements
    assert back.anchors == t.anchors
    assert dumps_topology(back) == dumps_topology(t)


def test_file_round_trip(tmp_path):
    t = Topology.build(3, [Measurement(0, 1, 2.5, 0.3, -0.1)]).with_weights([2.0], [0.5])
    save_topology(t, tmp_path / "t.json")
    back = load_topology(tmp_path / "t.json")
    assert back.measurements == t.measurements
    np.testing.assert_array_equal(back.arrays.w_range, [2.0])
    np.testing.assert_array_equal(back.arrays.w_angle, [0.5])
