"""Per-node orientation offsets from reciprocal angle-of-arrival pairs.

When two nodes share a frame, the AoAs they report of each other point in
opposite directions: azimuths differ by pi and elevations are negated.
Offsets are chosen to restore that for every reciprocal pair, with a
reference node fixing the gauge.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares

from .edge_select import UnionFind
from .frames import rotation_matrices, rotation_matrix_partials, transform_aoa, transform_aoa_many, unit_from_angles
from .topology import Measurement, Orientation, Topology, wrap_angle


class OrientationError(ValueError):
    pass


@dataclass(frozen=True)
class OffsetEstimate:
    orientations: tuple[Orientation, ...]
    reference: int = 0
    # one entry per connected component of the pair graph; the first id of
    # each is that component's gauge node
    components: tuple[tuple[int, ...], ...] = ()
    objective: float = 0.0

    def __getitem__(self, k: int) -> Orientation:
        return self.orientations[k]

    def __len__(self) -> int:
        return len(self.orientations)

    def as_array(self) -> np.ndarray:
        return np.array([o.as_array() for o in self.orientations]).reshape(-1, 3)


def _usable_pairs(topo: Topology) -> list[tuple[Measurement, Measurement]]:
    from .topology import reciprocal_pairs

    return [(a, b) for a, b in reciprocal_pairs(topo) if a.angle_valid and b.angle_valid]


def _components(n: int, pairs) -> list[list[int]]:
    uf = UnionFind(n)
    for a, _ in pairs:
        uf.union(a.src, a.dst)
    return uf.components()


def pair_residual(m_ij: Measurement, m_ji: Measurement, o_i: Orientation, o_j: Orientation) -> tuple[float, float]:
    """Wrapped complementarity residuals ``(az_ij - az_ji - pi, el_ij + el_ji)``."""
    if (m_ij.src, m_ij.dst) != (m_ji.dst, m_ji.src):
        raise OrientationError(f"{m_ij.src}->{m_ij.dst} and {m_ji.src}->{m_ji.dst} are not a reciprocal pair")
    az_i, el_i = transform_aoa(m_ij.azimuth, m_ij.elevation, o_i)
    az_j, el_j = transform_aoa(m_ji.azimuth, m_ji.elevation, o_j)
    return wrap_angle(az_i - az_j - np.pi), wrap_angle(el_i + el_j)


def offsets_objective(topo: Topology, offsets: Sequence[Orientation]) -> float:
    """Sum over reciprocal pairs of ``(1 - cos az_res) + (1 - cos el_res)``."""
    total = 0.0
    for a, b in _usable_pairs(topo):
        ra, re = pair_residual(a, b, offsets[a.src], offsets[b.src])
        total += (1.0 - np.cos(ra)) + (1.0 - np.cos(re))
    return float(total)


def _propagate_yaw(n: int, pairs, azimuth: dict, roots: Sequence[int]) -> np.ndarray:
    """Exact yaw offsets along a BFS tree of the pair graph (level-node assumption)."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, _ in pairs:
        adj[a.src].append(a.dst)
        adj[a.dst].append(a.src)
    for nb in adj:
        nb.sort()
    yaw = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    for root in roots:
        seen[root] = True
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if not seen[j]:
                    yaw[j] = wrap_angle(yaw[i] + azimuth[(i, j)] - azimuth[(j, i)] - np.pi)
                    seen[j] = True
                    queue.append(j)
    return yaw


def _check_connected(comps, allow_disconnected: bool):
    if len(comps) > 1 and not allow_disconnected:
        raise OrientationError(f"reciprocal-pair graph is disconnected; components: {comps}")


def _gauge_nodes(comps, reference: int) -> list[int]:
    return [reference if reference in c else c[0] for c in comps]


def estimate_offsets_yaw(
    topo: Topology,
    roll_pitch,
    reference: int = 0,
    allow_disconnected: bool = False,
) -> OffsetEstimate:
    """Yaw offsets given externally known roll/pitch.

    Every measurement is first re-levelled by its node's roll and pitch;
    yaws then minimise ``sum 1 - cos((az_ij + g_i) - (az_ji + g_j) - pi)``
    with the reference yaw held at 0.
    """
    n = topo.n
    rp = np.asarray(roll_pitch, dtype=float).reshape(n, 2)
    pairs = _usable_pairs(topo)
    comps = _components(n, pairs)
    _check_connected(comps, allow_disconnected)
    gauges = _gauge_nodes(comps, reference)

    a = topo.arrays
    rpy = np.zeros((len(a.src), 3))
    rpy[:, :2] = rp[a.src]
    lev_az, _ = transform_aoa_many(a.azimuth, a.elevation, rpy) if len(a.src) else (np.zeros(0), None)
    az = {(int(s), int(d)): float(v) for s, d, v in zip(a.src, a.dst, lev_az)}

    yaw0 = _propagate_yaw(n, pairs, az, gauges)
    if not pairs:
        yaw = yaw0
        obj = 0.0
    else:
        I = np.array([p[0].src for p in pairs])
        J = np.array([p[0].dst for p in pairs])
        tij = np.array([az[(p[0].src, p[0].dst)] for p in pairs])
        tji = np.array([az[(p[0].dst, p[0].src)] for p in pairs])
        gauge_set = set(gauges)
        free = np.array([v for v in range(n) if v not in gauge_set], dtype=np.int64)
        col = -np.ones(n, dtype=np.int64)
        col[free] = np.arange(len(free))
        m = len(pairs)

        def full(x):
            g = yaw0.copy()
            g[free] = x
            return g

        def fun(x):
            g = full(x)
            A = tij + g[I]
            B = tji + g[J] + np.pi
            return np.concatenate([np.cos(A) - np.cos(B), np.sin(A) - np.sin(B)])

        def jac(x):
            g = full(x)
            A = tij + g[I]
            B = tji + g[J] + np.pi
            rows, cols, vals = [], [], []
            for node, dc, ds in ((I, -np.sin(A), np.cos(A)), (J, np.sin(B), -np.cos(B))):
                c = col[node]
                keep = c >= 0
                k = np.flatnonzero(keep)
                rows += [k, k + m]
                cols += [c[keep], c[keep]]
                vals += [dc[keep], ds[keep]]
            J_ = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(2 * m, len(free)),
            )
            return J_ if sparse else J_.toarray()

        sparse = len(free) > 500
        # a spanning forest is solved exactly by propagation
        if len(free) and m > n - len(comps):
            res = least_squares(
                fun, yaw0[free], jac=jac, method="trf",
                tr_solver="lsmr" if sparse else "exact",
                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200,
            )
            yaw = full(res.x)
        else:
            yaw = yaw0
        r = fun(yaw[free])
        obj = 0.5 * float(r @ r)
    yaw = wrap_angle(yaw)
    ors = tuple(Orientation(float(rp[k, 0]), float(rp[k, 1]), float(yaw[k])) for k in range(n))
    return OffsetEstimate(ors, reference, tuple(tuple(c) for c in comps), obj)


def estimate_offsets_full(
    topo: Topology,
    reference: int = 0,
    init: Sequence[Orientation] | None = None,
    allow_disconnected: bool = False,
) -> OffsetEstimate:
    """Roll, pitch and yaw of every node from complementarity alone.

    The reference node's whole orientation is held at zero, so results are
    expressed in that node's body frame.  Rotation of a node about its only
    edge is unobservable; such nodes keep their initial roll about that axis.
    """
    n = topo.n
    pairs = _usable_pairs(topo)
    comps = _components(n, pairs)
    _check_connected(comps, allow_disconnected)
    gauges = _gauge_nodes(comps, reference)

    if init is None:
        az = {m.key: m.azimuth for m in topo.measurements}
        x0 = np.zeros((n, 3))
        x0[:, 2] = _propagate_yaw(n, pairs, az, gauges)
    else:
        x0 = np.array([o.as_array() for o in init], dtype=float)
    x0[gauges] = 0.0
    if not pairs:
        ors = tuple(Orientation.from_array(r) for r in x0)
        return OffsetEstimate(ors, reference, tuple(tuple(c) for c in comps), 0.0)

    gauge_set = set(gauges)
    free = np.array([v for v in range(n) if v not in gauge_set], dtype=np.int64)
    col = -np.ones(n, dtype=np.int64)
    col[free] = np.arange(len(free))
    I = np.array([p[0].src for p in pairs])
    J = np.array([p[0].dst for p in pairs])
    az_ij = np.array([p[0].azimuth for p in pairs])
    el_ij = np.array([p[0].elevation for p in pairs])
    az_ji = np.array([p[1].azimuth for p in pairs])
    el_ji = np.array([p[1].elevation for p in pairs])
    m = len(pairs)

    def full(x):
        o = x0.copy()
        o[free] = x.reshape(-1, 3)
        return o

    u_ij = unit_from_angles(az_ij, el_ij)
    u_ji = unit_from_angles(az_ji, el_ji)

    def directions(o):
        vi = np.einsum("kab,kb->ka", rotation_matrices(o[I]), u_ij)
        vj = np.einsum("kab,kb->ka", rotation_matrices(o[J]), u_ji)
        return vi, vj

    def angles(v):
        az = np.arctan2(v[:, 1], v[:, 0])
        el = np.arcsin(np.clip(v[:, 2], -1.0, 1.0))
        return az, el

    def fun(x):
        vi, vj = directions(full(x))
        ai, ei = angles(vi)
        aj, ej = angles(vj)
        b_az = aj + np.pi
        b_el = -ej
        return np.concatenate([
            np.cos(ai) - np.cos(b_az), np.sin(ai) - np.sin(b_az),
            np.cos(ei) - np.cos(b_el), np.sin(ei) - np.sin(b_el),
        ])

    def angle_partials(v, dv):
        # d(az)/d(params) and d(el)/d(params) given dv of shape (k, 3 params, 3)
        rxy2 = np.maximum(v[:, 0] ** 2 + v[:, 1] ** 2, 1e-300)
        daz = (v[:, 0, None] * dv[:, :, 1] - v[:, 1, None] * dv[:, :, 0]) / rxy2[:, None]
        del_ = dv[:, :, 2] / np.sqrt(rxy2)[:, None]
        return daz, del_

    def jac(x):
        o = full(x)
        vi, vj = directions(o)
        dvi = np.einsum("kpab,kb->kpa", rotation_matrix_partials(o[I]), u_ij)
        dvj = np.einsum("kpab,kb->kpa", rotation_matrix_partials(o[J]), u_ji)
        ai, ei = angles(vi)
        aj, ej = angles(vj)
        dai, dei = angle_partials(vi, dvi)
        daj, dej = angle_partials(vj, dvj)
        b_az, b_el = aj + np.pi, -ej
        rows, cols, vals = [], [], []

        def put(block, node, dres):
            c = col[node]
            keep = np.flatnonzero(c >= 0)
            for p in range(3):
                rows.append(block * m + keep)
                cols.append(3 * c[keep] + p)
                vals.append(dres[keep, p])

        # residual pairs (cos a - cos b, sin a - sin b); a depends on i, b on j
        put(0, I, -np.sin(ai)[:, None] * dai)
        put(1, I, np.cos(ai)[:, None] * dai)
        put(0, J, np.sin(b_az)[:, None] * daj)
        put(1, J, -np.cos(b_az)[:, None] * daj)
        put(2, I, -np.sin(ei)[:, None] * dei)
        put(3, I, np.cos(ei)[:, None] * dei)
        put(2, J, np.sin(b_el)[:, None] * -dej)
        put(3, J, -np.cos(b_el)[:, None] * -dej)
        Jm = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(4 * m, 3 * len(free)),
        )
        return Jm if sparse else Jm.toarray()

    sparse = len(free) > 150
    res = least_squares(
        fun, x0[free].ravel(), jac=jac, method="trf",
        tr_solver="lsmr" if sparse else "exact",
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=500,
    )
    o = full(res.x)
    r = fun(o[free].ravel())
    ors = tuple(Orientation.from_array(row).wrapped() for row in o)
    return OffsetEstimate(ors, reference, tuple(tuple(c) for c in comps), 0.5 * float(r @ r))


def to_global_frame(topo: Topology, offsets: Sequence[Orientation] | OffsetEstimate | np.ndarray) -> Topology:
    """Rotate every measurement's AoA by its observing node's offset; ranges untouched."""
    if isinstance(offsets, OffsetEstimate):
        rpy = offsets.as_array()
    elif isinstance(offsets, np.ndarray):
        rpy = offsets.reshape(-1, 3)
    else:
        rpy = np.array([o.as_array() for o in offsets]).reshape(-1, 3)
    if len(rpy) != topo.n:
        raise OrientationError(f"offsets cover {len(rpy)} nodes, topology has {topo.n}")
    a = topo.arrays
    if len(a.src) == 0:
        return topo
    az, el = transform_aoa_many(a.azimuth, a.elevation, rpy[a.src])
    ms = tuple(
        replace(m, azimuth=float(az[k]), elevation=float(np.clip(el[k], -np.pi / 2, np.pi / 2)))
        for k, m in enumerate(topo.measurements)
    )
    return replace(topo, measurements=ms)


def yaw_corrections(topo: Topology, X) -> np.ndarray:
    """Per-node yaw change that best fits world-frame azimuths to positions.

    For fixed positions the weighted azimuth misfit ``sum w (1 - cos(az + d_i - bearing))``
    of node ``i`` is minimised by the circular mean of ``bearing - az`` over
    its own measurements, so the correction is closed form.  Nodes without
    usable angle measurements get 0.
    """
    a = topo.arrays
    P = np.asarray(X, dtype=float).reshape(topo.n, 3)
    d = P[a.dst] - P[a.src]
    w = np.where(np.hypot(d[:, 0], d[:, 1]) > 0, a.w_angle, 0.0)
    diff = np.arctan2(d[:, 1], d[:, 0]) - a.azimuth
    S = np.bincount(a.src, weights=w * np.sin(diff), minlength=topo.n)
    C = np.bincount(a.src, weights=w * np.cos(diff), minlength=topo.n)
    return np.where((S != 0) | (C != 0), np.arctan2(S, C), 0.0)


def rotate_yaw(topo: Topology, delta) -> Topology:
    """Turn every measurement's world azimuth by its observer's ``delta`` (elevations are unchanged)."""
    delta = np.asarray(delta, dtype=float)
    a = topo.arrays
    az = wrap_angle(a.azimuth + delta[a.src])
    ms = tuple(
        replace(m, azimuth=float(az[k])) if m.angle_valid else m
        for k, m in enumerate(topo.measurements)
    )
    return replace(topo, measurements=ms)
