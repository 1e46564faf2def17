"""Synthetic scenarios: node placement, noisy UWB measurements, mobility, latency."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _rng
from .anchors import Trajectory
from .frames import angles_from_unit, rotation_matrices
from .topology import LOS, NLOS, Measurement, Orientation, Position, wrap_angle

log = logging.getLogger(__name__)

# stream tags for the keyed RNG
_TAG_LOS, _TAG_RANGE, _TAG_AZ, _TAG_EL, _TAG_WAYPOINT, _TAG_SPEED = 1, 2, 3, 4, 5, 6

STATIONARY_SPEED = 0.05


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    range_sigma_los: float = 0.1
    range_sigma_nlos: float = 0.3
    aoa_sigma_los: float = math.radians(3.0)
    aoa_sigma_nlos: float = math.radians(8.0)
    max_range: float = 50.0
    nlos_steepness: float = 6.0
    nlos_enabled: bool = True

    def __post_init__(self):
        for f in ("range_sigma_los", "range_sigma_nlos", "aoa_sigma_los", "aoa_sigma_nlos"):
            if not getattr(self, f) >= 0:
                raise ScenarioError(f"{f} must be >= 0")
        if not self.max_range > 0:
            raise ScenarioError("max_range must be > 0")
        if not self.nlos_steepness > 0:
            raise ScenarioError("nlos_steepness must be > 0")

    def nlos_probability(self, distance):
        """Logistic in distance, rescaled so p(0) = 0 and p(max_range) = 0.5."""
        d = np.asarray(distance, dtype=float)
        k = self.nlos_steepness

        def s(x):
            return 1.0 / (1.0 + np.exp(-k * (x / self.max_range - 1.0)))

        s0 = s(0.0)
        p = 0.5 * (s(d) - s0) / (0.5 - s0)
        p = np.clip(p, 0.0, 1.0) if self.nlos_enabled else np.zeros_like(d)
        return float(p) if np.ndim(p) == 0 else p

    def sigma_scale(self, los: str) -> float:
        """Unitless noise scale of a link class, used as ``sigma_los`` in edge weights."""
        if los == LOS:
            return 1.0
        if self.range_sigma_los > 0:
            return max(1.0, self.range_sigma_nlos / self.range_sigma_los)
        return 3.0

    def scaled(self, factor: float) -> "NoiseModel":
        return replace(
            self,
            range_sigma_los=self.range_sigma_los * factor,
            range_sigma_nlos=self.range_sigma_nlos * factor,
            aoa_sigma_los=self.aoa_sigma_los * factor,
            aoa_sigma_nlos=self.aoa_sigma_nlos * factor,
        )


NOISE_PROFILES = {
    "default": NoiseModel(),
    "noiseless": NoiseModel(0.0, 0.0, 0.0, 0.0, nlos_enabled=False),
    "los_only": NoiseModel(nlos_enabled=False),
    "high": NoiseModel().scaled(2.0),
}


def noise_profile(name: str, max_range: float | None = None) -> NoiseModel:
    if name not in NOISE_PROFILES:
        raise ScenarioError(f"unknown noise profile {name!r}; choose from {sorted(NOISE_PROFILES)}")
    nm = NOISE_PROFILES[name]
    return nm if max_range is None else replace(nm, max_range=float(max_range))


@dataclass(frozen=True)
class LatencyModel:
    measurement_rate: float = 20.0  # Hz, one measurement at a time

    def __post_init__(self):
        if not self.measurement_rate > 0:
            raise ScenarioError("measurement_rate must be > 0")


def simulate_epoch_latency(m_count: int, lm: LatencyModel = LatencyModel()) -> float:
    if m_count < 0:
        raise ValueError("m_count must be >= 0")
    return m_count / lm.measurement_rate


@dataclass(frozen=True)
class ScenarioParams:
    n: int = 50
    bounds: tuple[float, float, float] = (100.0, 100.0, 10.0)
    anchor_fraction: float = 0.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    fov: float = 2.0 * math.pi
    seed: int = 0
    tilt_sigma: float = math.radians(5.0)
    mobile: bool = False
    speed_range: tuple[float, float] = (0.5, 1.5)
    require_anchors: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ScenarioError("n must be >= 1")
        if len(self.bounds) != 3 or not all(b > 0 for b in self.bounds):
            raise ScenarioError("bounds must be three positive lengths")
        if not 0.0 <= self.anchor_fraction <= 1.0:
            raise ScenarioError("anchor_fraction must be in [0, 1]")
        if not 0.0 < self.fov <= 2.0 * math.pi:
            raise ScenarioError("fov must be in (0, 2*pi]")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ScenarioError("speed_range must satisfy 0 < lo <= hi")

    @property
    def anchor_count(self) -> int:
        return math.floor(self.anchor_fraction * self.n + 0.5)


@dataclass(frozen=True)
class Scenario:
    params: ScenarioParams
    positions: np.ndarray  # (n, 3)
    orientations: np.ndarray  # (n, 3) roll, pitch, yaw
    anchor_order: np.ndarray  # permutation of node ids; anchors are a prefix
    waypoints: np.ndarray | None = None
    speeds: np.ndarray | None = None
    legs: np.ndarray | None = None  # waypoint draws consumed so far, per node
    time: float = 0.0

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def noise(self) -> NoiseModel:
        return self.params.noise

    @property
    def anchors(self) -> list[int]:
        return self.anchor_ids(self.params.anchor_count)

    def anchor_ids(self, count: int) -> list[int]:
        if count > self.n:
            raise ScenarioError(f"cannot pick {count} anchors from {self.n} nodes")
        return sorted(int(v) for v in self.anchor_order[:count])

    def anchor_positions(self, count: int | None = None) -> dict[int, Position]:
        ids = self.anchors if count is None else self.anchor_ids(count)
        return {i: Position.from_array(self.positions[i]) for i in ids}

    def orientation(self, i: int) -> Orientation:
        return Orientation.from_array(self.orientations[i])

    def velocities(self) -> np.ndarray:
        if self.waypoints is None:
            return np.zeros((self.n, 3))
        d = self.waypoints - self.positions
        dist = np.linalg.norm(d, axis=1, keepdims=True)
        return np.where(dist > 0, d / np.where(dist > 0, dist, 1.0), 0.0) * self.speeds[:, None]


def _draw_waypoints(p: ScenarioParams, nodes: np.ndarray, legs: np.ndarray):
    B = np.asarray(p.bounds, dtype=float)
    wp = np.stack([_rng.uniform(p.seed, _TAG_WAYPOINT, nodes, legs, c) for c in range(3)], axis=1) * B
    lo, hi = p.speed_range
    sp = lo + (hi - lo) * _rng.uniform(p.seed, _TAG_SPEED, nodes, legs, 0)
    return wp, sp


def generate_scenario(params: ScenarioParams) -> Scenario:
    """Uniform placement in the bounds box, uniform yaw, small Gaussian roll/pitch."""
    p = params
    if p.require_anchors and p.anchor_count < 1:
        raise ScenarioError(f"anchor_fraction {p.anchor_fraction} gives no anchors for n={p.n}")
    rng = np.random.default_rng(p.seed)
    P = rng.uniform(0.0, 1.0, size=(p.n, 3)) * np.asarray(p.bounds, dtype=float)
    yaw = rng.uniform(-math.pi, math.pi, size=p.n)
    tilt = rng.normal(0.0, p.tilt_sigma, size=(p.n, 2))
    O = np.column_stack([tilt, yaw])
    order = rng.permutation(p.n)
    s = Scenario(p, P, O, order)
    if p.mobile:
        legs = np.zeros(p.n, dtype=np.int64)
        wp, sp = _draw_waypoints(p, np.arange(p.n), legs)
        s = replace(s, waypoints=wp, speeds=sp, legs=legs)
        s = replace(s, orientations=_heading_yaw(s))
    return s


def _heading_yaw(s: Scenario) -> np.ndarray:
    v = s.velocities()
    O = s.orientations.copy()
    moving = np.hypot(v[:, 0], v[:, 1]) > 0
    O[moving, 2] = np.arctan2(v[moving, 1], v[moving, 0])
    return O


def candidate_pairs(s: Scenario, max_range: float | None = None) -> np.ndarray:
    """All node pairs ``i < j`` within range, lexicographically sorted, shape (k, 2)."""
    r = s.noise.max_range if max_range is None else max_range
    pairs = cKDTree(s.positions).query_pairs(r, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs, axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order].astype(np.int64)


def synthesize_measurements(
    s: Scenario,
    edges: Sequence[tuple[int, int]] | np.ndarray,
    both_directions: bool = True,
    epoch: int = 0,
) -> list[Measurement]:
    """Noisy directed measurements for the given node pairs.

    AoA is expressed in the observing node's body frame.  A pair's LOS/NLOS
    class is shared by both directions; every noise draw is keyed by
    ``(seed, epoch, src, dst)``.  Pairs beyond ``max_range`` are dropped.
    """
    E = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if both_directions:
        E = np.concatenate([E, E[:, ::-1]]).reshape(-1, 2)
        E = E[np.lexsort((E[:, 1], E[:, 0]))] if len(E) else E
    if len(E) == 0:
        return []
    nm = s.noise
    src, dst = E[:, 0], E[:, 1]
    d = s.positions[dst] - s.positions[src]
    r = np.linalg.norm(d, axis=1)
    far = r > nm.max_range
    if far.any():
        for a, b in E[far]:
            log.warning("event=edge_omitted src=%d dst=%d reason=beyond_max_range", a, b)
        E, src, dst, d, r = E[~far], src[~far], dst[~far], d[~far], r[~far]
    if np.any(r == 0):
        raise ScenarioError("coincident nodes cannot be measured")

    R = rotation_matrices(s.orientations[src])
    local = np.einsum("kji,kj->ki", R, d)  # R^T d
    az, el = angles_from_unit(local)
    az, el = np.atleast_1d(az), np.atleast_1d(el)
    valid = np.abs(np.arctan2(local[:, 1], local[:, 0])) <= s.params.fov / 2.0 + 1e-12

    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    seed = s.params.seed
    nlos = _rng.uniform(seed, _TAG_LOS, lo, hi, epoch) < nm.nlos_probability(r)
    sr = np.where(nlos, nm.range_sigma_nlos, nm.range_sigma_los)
    sa = np.where(nlos, nm.aoa_sigma_nlos, nm.aoa_sigma_los)
    rng_meas = np.maximum(0.0, r + sr * _rng.normal(seed, _TAG_RANGE, src, dst, epoch))
    az_meas = wrap_angle(az + sa * _rng.normal(seed, _TAG_AZ, src, dst, epoch))
    el_meas = np.clip(el + sa * _rng.normal(seed, _TAG_EL, src, dst, epoch), -math.pi / 2, math.pi / 2)
    az_meas = np.atleast_1d(az_meas)
    scale = {LOS: nm.sigma_scale(LOS), NLOS: nm.sigma_scale(NLOS)}
    out = []
    for k in range(len(src)):
        cls = NLOS if nlos[k] else LOS
        ok = bool(valid[k])
        out.append(Measurement(
            int(src[k]), int(dst[k]), float(rng_meas[k]),
            float(az_meas[k]) if ok else 0.0, float(el_meas[k]) if ok else 0.0,
            ok, cls, scale[cls],
        ))
    return out


def step_mobility(s: Scenario, dt: float) -> Scenario:
    """Advance random-waypoint motion by ``dt`` seconds; yaw tracks the heading."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if s.waypoints is None or dt == 0:
        return s if dt == 0 else replace(s, time=s.time + dt)
    P = s.positions.copy()
    wp = s.waypoints.copy()
    sp = s.speeds.copy()
    legs = s.legs.copy()
    remaining = np.full(s.n, float(dt))
    for _ in range(1000):
        d = wp - P
        dist = np.linalg.norm(d, axis=1)
        reach = dist / sp
        arrive = (reach <= remaining) & (remaining > 0)
        move = ~arrive & (remaining > 0)
        if move.any():
            P[move] += d[move] / dist[move, None] * (sp[move] * remaining[move])[:, None]
            remaining[move] = 0.0
        if arrive.any():
            idx = np.flatnonzero(arrive)
            P[idx] = wp[idx]
            remaining[idx] -= reach[idx]
            legs[idx] += 1
            wp[idx], sp[idx] = _draw_waypoints(s.params, idx, legs[idx])
        if not (remaining > 0).any():
            break
    out = replace(s, positions=P, waypoints=wp, speeds=sp, legs=legs, time=s.time + dt)
    return replace(out, orientations=_heading_yaw(out))


def simulate_trajectories(s: Scenario, duration: float, period: float, jitter: float = 0.0, seed_tag: int = 0):
    """Sample every node's position at a fixed period while moving.

    Returns ``(final_scenario, {node: Trajectory})``.  ``jitter`` adds keyed
    Gaussian position noise (used for camera tracks).
    """
    steps = int(round(duration / period))
    samples = [s.positions.copy()]
    cur = s
    for _ in range(steps):
        cur = step_mobility(cur, period)
        samples.append(cur.positions.copy())
    S = np.stack(samples, axis=1)  # (n, steps+1, 3)
    if jitter > 0:
        nodes = np.arange(s.n)[:, None, None]
        ks = np.arange(S.shape[1])[None, :, None] * 3 + np.arange(3)[None, None, :]
        S = S + jitter * _rng.normal(s.params.seed, 100 + seed_tag, nodes, 0, ks)
    t = s.time + period * np.arange(steps + 1)
    return cur, {i: Trajectory(i, t, S[i]) for i in range(s.n)}


# -- file I/O ----------------------------------------------------------------


def scenario_to_dict(s: Scenario) -> dict:
    p = asdict(s.params)
    p["bounds"] = list(s.params.bounds)
    p["speed_range"] = list(s.params.speed_range)
    d = {
        "params": p,
        "time": s.time,
        "nodes": [
            {"id": i, "x": float(x), "y": float(y), "z": float(z),
             "roll": float(a), "pitch": float(b), "yaw": float(g)}
            for i, ((x, y, z), (a, b, g)) in enumerate(zip(s.positions, s.orientations))
        ],
        "anchor_order": [int(v) for v in s.anchor_order],
        "anchors": s.anchors,
    }
    if s.waypoints is not None:
        d["mobility"] = {
            "waypoints": s.waypoints.tolist(),
            "speeds": s.speeds.tolist(),
            "legs": s.legs.tolist(),
        }
    return d


def scenario_from_dict(d: dict) -> Scenario:
    p = dict(d["params"])
    p["noise"] = NoiseModel(**p["noise"])
    p["bounds"] = tuple(p["bounds"])
    p["speed_range"] = tuple(p["speed_range"])
    known = {f.name for f in fields(ScenarioParams)}
    extra = set(p) - known
    if extra:
        raise ScenarioError(f"unknown scenario parameters: {sorted(extra)}")
    params = ScenarioParams(**p)
    nodes = sorted(d["nodes"], key=lambda r: r["id"])
    if len(nodes) != params.n:
        raise ScenarioError(f"scenario lists {len(nodes)} nodes but n={params.n}")
    P = np.array([[r["x"], r["y"], r["z"]] for r in nodes], dtype=float).reshape(-1, 3)
    O = np.array([[r["roll"], r["pitch"], r["yaw"]] for r in nodes], dtype=float).reshape(-1, 3)
    s = Scenario(params, P, O, np.array(d["anchor_order"], dtype=np.int64), time=float(d.get("time", 0.0)))
    mob = d.get("mobility")
    if mob:
        s = replace(
            s,
            waypoints=np.array(mob["waypoints"], dtype=float).reshape(-1, 3),
            speeds=np.array(mob["speeds"], dtype=float),
            legs=np.array(mob["legs"], dtype=np.int64),
        )
    return s


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2) + "\n"


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(s))


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))
