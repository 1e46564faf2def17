import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netloc.frames import rotation_matrices
from netloc.objective import joint_loss
from netloc.sim import (
    LatencyModel,
    NoiseModel,
    ScenarioError,
    ScenarioParams,
    dumps_scenario,
    generate_scenario,
    load_scenario,
    noise_profile,
    save_scenario,
    simulate_epoch_latency,
    simulate_trajectories,
    step_mobility,
    synthesize_measurements,
)
from netloc.topology import NLOS, wrap_angle

from conftest import make_scenario, measured_topology


def test_same_seed_same_scenario():
    a = dumps_scenario(generate_scenario(ScenarioParams(n=10, seed=7)))
    b = dumps_scenario(generate_scenario(ScenarioParams(n=10, seed=7)))
    assert a == b
    assert a != dumps_scenario(generate_scenario(ScenarioParams(n=10, seed=8)))


def test_anchor_counts():
    assert ScenarioParams(n=1000, anchor_fraction=0.1).anchor_count == 100
    assert ScenarioParams(n=30000, anchor_fraction=0.0005).anchor_count == 15
    s = generate_scenario(ScenarioParams(n=1000, anchor_fraction=0.1, seed=1))
    assert len(s.anchors) == 100 and len(set(s.anchors)) == 100
    with pytest.raises(ScenarioError):
        generate_scenario(ScenarioParams(n=10, anchor_fraction=0.01, require_anchors=True))


@pytest.mark.parametrize("bad", [dict(n=0), dict(bounds=(1, 0, 1)), dict(anchor_fraction=1.5), dict(fov=0.0)])
def test_invalid_params(bad):
    with pytest.raises(ScenarioError):
        ScenarioParams(**bad)


def test_positions_within_bounds():
    s = generate_scenario(ScenarioParams(n=500, bounds=(10.0, 20.0, 3.0), seed=2))
    assert np.all(s.positions >= 0) and np.all(s.positions <= [10, 20, 3])


def test_noiseless_measurements_are_consistent():
    s = make_scenario(15, seed=1)
    t = measured_topology(s, world=True)
    assert joint_loss(t, s.positions).total < 1e-20


def test_fov_marks_rear_angles_invalid():
    s = make_scenario(30, seed=4, fov=math.radians(120))
    t = measured_topology(s)
    R = rotation_matrices(s.orientations)
    for m in t.measurements:
        local = R[m.src].T @ (s.positions[m.dst] - s.positions[m.src])
        behind = abs(math.atan2(local[1], local[0])) > math.radians(60) + 1e-9
        assert m.angle_valid != behind


def test_far_pairs_are_omitted(caplog):
    s = make_scenario(2, seed=0, bounds=(500.0, 500.0, 5.0))
    far = float(np.linalg.norm(s.positions[0] - s.positions[1])) > s.noise.max_range
    out = synthesize_measurements(s, [(0, 1)])
    assert (len(out) == 0) == far
    if far:
        assert "beyond_max_range" in caplog.text


def test_noise_statistics_within_five_percent():
    nm = NoiseModel(0.1, 0.1, math.radians(3), math.radians(3), max_range=1e6, nlos_enabled=False)
    s = generate_scenario(ScenarioParams(n=101, bounds=(50.0, 50.0, 1.0), seed=3, noise=nm, tilt_sigma=0.0))
    pairs = np.array([(i, j) for i in range(101) for j in range(i + 1, 101)])[:5000]
    out = synthesize_measurements(s, pairs)
    assert len(out) == 10_000
    R = rotation_matrices(s.orientations)
    dr, da = [], []
    for m in out:
        d = R[m.src].T @ (s.positions[m.dst] - s.positions[m.src])
        dr.append(m.range - np.linalg.norm(d))
        da.append(wrap_angle(m.azimuth - math.atan2(d[1], d[0])))
    assert np.std(dr) == pytest.approx(0.1, rel=0.05)
    assert np.std(da) == pytest.approx(math.radians(3), rel=0.05)


def test_nlos_probability_shape():
    nm = NoiseModel()
    assert nm.nlos_probability(0.0) == pytest.approx(0.0)
    assert nm.nlos_probability(nm.max_range) == pytest.approx(0.5)
    d = np.linspace(0, nm.max_range, 50)
    assert np.all(np.diff(nm.nlos_probability(d)) >= 0)
    assert NoiseModel(nlos_enabled=False).nlos_probability(30.0) == 0.0


def test_link_class_is_shared_by_directions():
    s = make_scenario(20, seed=2, noise="default", bounds=(60.0, 60.0, 5.0))
    t = measured_topology(s)
    cls = {m.key: m.los for m in t.measurements}
    assert all(cls[(j, i)] == c for (i, j), c in cls.items())
    assert any(c == NLOS for c in cls.values())


def test_noise_profiles():
    assert noise_profile("noiseless").range_sigma_los == 0.0
    assert noise_profile("high").aoa_sigma_nlos == pytest.approx(2 * noise_profile("default").aoa_sigma_nlos)
    assert noise_profile("default", max_range=100).max_range == 100
    with pytest.raises(ScenarioError):
        noise_profile("loud")


def test_latency():
    assert simulate_epoch_latency(0) == 0.0
    assert simulate_epoch_latency(100) == 5.0
    assert simulate_epoch_latency(147) / simulate_epoch_latency(49) == pytest.approx(3.0)
    assert simulate_epoch_latency(10, LatencyModel(10.0)) == 1.0
    with pytest.raises(ScenarioError):
        LatencyModel(0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500))
def test_latency_is_linear(a, b):
    assert simulate_epoch_latency(a + b) == pytest.approx(simulate_epoch_latency(a) + simulate_epoch_latency(b))


def mobile(seed=0, n=6):
    return generate_scenario(ScenarioParams(n=n, bounds=(20.0, 20.0, 0.5), seed=seed, mobile=True))


def test_zero_step_is_identity():
    s = mobile()
    assert step_mobility(s, 0.0) is s


def test_speed_bounds_and_heading():
    s = mobile(1)
    for _ in range(1000):
        v = s.velocities()
        nxt = step_mobility(s, 0.1)
        step = np.linalg.norm(nxt.positions - s.positions, axis=1)
        assert np.all(step <= 1.5 * 0.1 + 1e-9)
        moving = np.hypot(v[:, 0], v[:, 1]) > 0
        np.testing.assert_allclose(wrap_angle(s.orientations[moving, 2] - np.arctan2(v[moving, 1], v[moving, 0])), 0, atol=1e-12)
        s = nxt


def test_mobility_is_deterministic():
    a = simulate_trajectories(mobile(3), 10.0, 0.5)[1]
    b = simulate_trajectories(mobile(3), 10.0, 0.5)[1]
    for k in a:
        np.testing.assert_array_equal(a[k].samples, b[k].samples)


def test_static_scenario_does_not_move():
    s = make_scenario(5)
    np.testing.assert_array_equal(step_mobility(s, 2.0).positions, s.positions)


def test_scenario_file_round_trip(tmp_path):
    s = step_mobility(mobile(2), 3.0)
    save_scenario(s, tmp_path / "s.json")
    back = load_scenario(tmp_path / "s.json")
    assert dumps_scenario(back) == dumps_scenario(s)
    np.testing.assert_array_equal(step_mobility(back, 1.0).positions, step_mobility(s, 1.0).positions)
