import math

import numpy as np
import pytest

from netloc.sim import ScenarioParams, candidate_pairs, generate_scenario, noise_profile, synthesize_measurements
from netloc.orientation import to_global_frame
from netloc.topology import Topology


def make_scenario(n=10, seed=0, bounds=(30.0, 30.0, 5.0), noise="noiseless", **kw):
    return generate_scenario(ScenarioParams(n=n, bounds=bounds, seed=seed, noise=noise_profile(noise), **kw))


def measured_topology(s, pairs=None, world=False):
    """Both directions of every pair; ``world`` rotates the angles by the true orientations."""
    pairs = candidate_pairs(s) if pairs is None else pairs
    t = Topology.build(s.n, synthesize_measurements(s, pairs))
    return to_global_frame(t, s.orientations) if world else t


@pytest.fixture
def noiseless10():
    return make_scenario(10, seed=3)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def level(yaw):
    return np.array([0.0, 0.0, yaw])


__all__ = ["make_scenario", "measured_topology", "rel_err", "level", "math"]
