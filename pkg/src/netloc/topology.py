"""Graph data model: nodes, directed pairwise measurements, anchors and weights.

A measurement ``(i -> j)`` is node ``i``'s observation of node ``j``: the
range between them and the azimuth/elevation at which ``i`` sees ``j`` in
``i``'s own body frame.  Both directions of a pair are stored separately.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

LOS = "LOS"
NLOS = "NLOS"


class TopologyError(ValueError):
    """Raised when a measurement or anchor violates the data model."""


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise TopologyError(f"non-finite position {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Position":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Orientation:
    """Roll, pitch, yaw in radians; composed as Rz(yaw) @ Ry(pitch) @ Rx(roll)."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def wrapped(self) -> "Orientation":
        return Orientation(wrap_angle(self.roll), wrap_angle(self.pitch), wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Orientation":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Measurement:
    """One directed observation ``src -> dst``.

    ``sigma_los`` is the ranging noise scale of the link class and feeds the
    edge-selection weight.
    """

    src: int
    dst: int
    range: float
    azimuth: float = 0.0
    elevation: float = 0.0
    angle_valid: bool = True
    los: str = LOS
    sigma_los: float = 0.1

    def __post_init__(self):
        if self.src == self.dst:
            raise TopologyError(f"self-edge on node {self.src}")
        if self.src < 0 or self.dst < 0:
            raise TopologyError(f"negative node id in {self.src}->{self.dst}")
        for name in ("range", "azimuth", "elevation", "sigma_los"):
            if not math.isfinite(getattr(self, name)):
                raise TopologyError(f"non-finite {name} on edge {self.src}->{self.dst}")
        if self.range < 0:
            raise TopologyError(f"negative range on edge {self.src}->{self.dst}")
        if self.sigma_los < 0:
            raise TopologyError(f"negative sigma_los on edge {self.src}->{self.dst}")
        if not -math.pi / 2 - 1e-12 <= self.elevation <= math.pi / 2 + 1e-12:
            raise TopologyError(f"elevation out of range on edge {self.src}->{self.dst}")
        if self.los not in (LOS, NLOS):
            raise TopologyError(f"unknown link class {self.los!r}")

    @property
    def key(self) -> tuple[int, int]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class EdgeWeights:
    """Per-measurement weights aligned with ``Topology.measurements``."""

    w_range: np.ndarray
    w_angle: np.ndarray


@dataclass(frozen=True)
class MeasurementArrays:
    """Column view of the measurements, used by the numeric kernels."""

    src: np.ndarray
    dst: np.ndarray
    range: np.ndarray
    azimuth: np.ndarray
    elevation: np.ndarray
    angle_valid: np.ndarray
    w_range: np.ndarray
    w_angle: np.ndarray

    @cached_property
    def src_xyz(self) -> np.ndarray:
        """Flat coordinate indices ``3*src + (0, 1, 2)`` for scattering gradients."""
        return (3 * self.src[:, None] + np.arange(3)).ravel()

    @cached_property
    def dst_xyz(self) -> np.ndarray:
        return (3 * self.dst[:, None] + np.arange(3)).ravel()

    @cached_property
    def cos_az(self) -> np.ndarray:
        return np.cos(self.azimuth)

    @cached_property
    def sin_az(self) -> np.ndarray:
        return np.sin(self.azimuth)

    @cached_property
    def cos_el(self) -> np.ndarray:
        return np.cos(self.elevation)

    @cached_property
    def sin_el(self) -> np.ndarray:
        return np.sin(self.elevation)


@dataclass(frozen=True)
class Topology:
    n: int
    measurements: tuple[Measurement, ...] = ()
    anchors: Mapping[int, Position] = field(default_factory=dict)
    # Optional weight overrides aligned with ``measurements``; None means
    # the default weight of 1 (angle weight 0 where the angle is invalid).
    w_range: tuple[float, ...] | None = None
    w_angle: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError("topology needs at least one node")
        for m in self.measurements:
            if m.src >= self.n or m.dst >= self.n:
                raise TopologyError(f"node id out of range in {m.src}->{m.dst} (n={self.n})")
        for a in self.anchors:
            if not 0 <= a < self.n:
                raise TopologyError(f"anchor id {a} out of range (n={self.n})")
        for w in (self.w_range, self.w_angle):
            if w is not None and len(w) != len(self.measurements):
                raise TopologyError("weight vector length does not match measurements")
        object.__setattr__(self, "anchors", dict(sorted(self.anchors.items())))

    @classmethod
    def build(
        cls,
        n: int,
        measurements: Iterable[Measurement] = (),
        anchors: Mapping[int, Position] | None = None,
    ) -> "Topology":
        """Bulk constructor applying the replace-on-duplicate rule."""
        latest: dict[tuple[int, int], Measurement] = {}
        for m in measurements:
            latest.pop(m.key, None)
            latest[m.key] = m
        return cls(n=n, measurements=tuple(latest.values()), anchors=dict(anchors or {}))

    @property
    def weights(self) -> EdgeWeights:
        a = self.arrays
        return EdgeWeights(a.w_range, a.w_angle)

    @cached_property
    def arrays(self) -> MeasurementArrays:
        ms = self.measurements
        valid = np.array([m.angle_valid for m in ms], dtype=bool)
        wr = np.ones(len(ms)) if self.w_range is None else np.asarray(self.w_range, dtype=float)
        wa = np.ones(len(ms)) if self.w_angle is None else np.asarray(self.w_angle, dtype=float)
        return MeasurementArrays(
            src=np.array([m.src for m in ms], dtype=np.int64),
            dst=np.array([m.dst for m in ms], dtype=np.int64),
            range=np.array([m.range for m in ms], dtype=float),
            azimuth=np.array([m.azimuth for m in ms], dtype=float),
            elevation=np.array([m.elevation for m in ms], dtype=float),
            angle_valid=valid,
            w_range=wr,
            w_angle=np.where(valid, wa, 0.0),
        )

    def with_weights(self, w_range: Sequence[float], w_angle: Sequence[float]) -> "Topology":
        return replace(self, w_range=tuple(float(v) for v in w_range), w_angle=tuple(float(v) for v in w_angle))

    def with_measurements(self, measurements: Iterable[Measurement]) -> "Topology":
        """New topology with the given measurements and default weights."""
        return Topology.build(self.n, measurements, self.anchors)

    def with_anchors(self, anchors: Mapping[int, Position]) -> "Topology":
        return replace(self, anchors=dict(anchors))

    def anchor_array(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(list(self.anchors), dtype=np.int64)
        pos = np.array([p.as_array() for p in self.anchors.values()], dtype=float).reshape(-1, 3)
        return ids, pos

    def find(self, src: int, dst: int) -> Measurement | None:
        for m in self.measurements:
            if m.src == src and m.dst == dst:
                return m
        return None


def add_measurement(topo: Topology, m: Measurement) -> Topology:
    """Return a new topology with ``m`` added; an existing ``(src, dst)`` entry is replaced."""
    if m.src >= topo.n or m.dst >= topo.n:
        raise TopologyError(f"node id out of range in {m.src}->{m.dst} (n={topo.n})")
    kept = [(k, x) for k, x in enumerate(topo.measurements) if x.key != m.key]
    ms = tuple(x for _, x in kept) + (m,)
    wr = wa = None
    if topo.w_range is not None:
        wr = tuple(topo.w_range[k] for k, _ in kept) + (1.0,)
    if topo.w_angle is not None:
        wa = tuple(topo.w_angle[k] for k, _ in kept) + (1.0,)
    return replace(topo, measurements=ms, w_range=wr, w_angle=wa)


def reciprocal_pairs(topo: Topology) -> list[tuple[Measurement, Measurement]]:
    """Pairs ``(i->j, j->i)`` with ``i < j`` present in both directions, sorted by ``(i, j)``."""
    by_key = {m.key: m for m in topo.measurements}
    out = []
    for (i, j), m in by_key.items():
        if i < j and (j, i) in by_key:
            out.append((m, by_key[(j, i)]))
    out.sort(key=lambda p: (p[0].src, p[0].dst))
    return out


def undirected_edges(topo: Topology) -> list[tuple[int, int]]:
    return sorted({(min(m.src, m.dst), max(m.src, m.dst)) for m in topo.measurements})


# -- canonical file format ---------------------------------------------------


def topology_to_dict(topo: Topology) -> dict:
    d = {
        "n": topo.n,
        "anchors": [{"id": i, "x": p.x, "y": p.y, "z": p.z} for i, p in topo.anchors.items()],
        "measurements": [
            {
                "from": m.src,
                "to": m.dst,
                "range": m.range,
                "azimuth": m.azimuth,
                "elevation": m.elevation,
                "angle_valid": m.angle_valid,
                "los": m.los,
                "sigma_los": m.sigma_los,
            }
            for m in topo.measurements
        ],
    }
    # weights are written only when they differ from the all-ones default
    for key, w in (("w_range", topo.w_range), ("w_angle", topo.w_angle)):
        if w is not None:
            for row, v in zip(d["measurements"], w):
                row[key] = float(v)
    return d


def topology_from_dict(d: dict) -> Topology:
    try:
        anchors = {int(a["id"]): Position(float(a["x"]), float(a["y"]), float(a["z"])) for a in d.get("anchors", [])}
        ms = [
            Measurement(
                src=int(m["from"]),
                dst=int(m["to"]),
                range=float(m["range"]),
                azimuth=float(m["azimuth"]),
                elevation=float(m["elevation"]),
                angle_valid=bool(m["angle_valid"]),
                los=str(m["los"]),
                sigma_los=float(m["sigma_los"]),
            )
            for m in d.get("measurements", [])
        ]
        rows = d.get("measurements", [])
        topo = Topology.build(int(d["n"]), ms, anchors)
        if any("w_range" in m or "w_angle" in m for m in rows):
            if len(topo.measurements) != len(rows):
                raise TopologyError("weighted topology documents may not repeat a measurement")
            topo = topo.with_weights([m.get("w_range", 1.0) for m in rows], [m.get("w_angle", 1.0) for m in rows])
        return topo
    except KeyError as exc:
        raise TopologyError(f"missing field {exc.args[0]!r} in topology document") from exc


def dumps_topology(topo: Topology) -> str:
    return json.dumps(topology_to_dict(topo), indent=2) + "\n"


def save_topology(topo: Topology, path: str | Path) -> None:
    Path(path).write_text(dumps_topology(topo))


def load_topology(path: str | Path) -> Topology:
    return topology_from_dict(json.loads(Path(path).read_text()))
