"""Joint range/angle loss, its analytic gradient and the position solver.

Measurements are expected in a common (global) frame: a measurement
``i -> j`` with azimuth ``az`` and elevation ``el`` predicts the direction of
``X[j] - X[i]``.  Use :func:`netloc.orientation.to_global_frame` first when
the angles are still in each node's body frame.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.sparse.linalg import spsolve

from .frames import transform_aoa, unit_from_angles
from .topology import Measurement, MeasurementArrays, Orientation, Topology

log = logging.getLogger(__name__)

# Denominator clamp for horizontal distance in the angle terms.
RXY_MIN = 1e-9
DENSE_INIT_LIMIT = 200  # below this node count a dense solve beats sparse setup


class SolverError(RuntimeError):
    """The solver hit a non-finite loss or an impossible initialisation."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 5000
    gradient_tolerance: float = 1e-10
    step_rule: str = "backtracking"  # or "fixed"
    initial_step: float = 1.0
    anchor_pin_mode: str = "hard"  # or "soft"
    anchor_penalty: float = 1.0
    armijo: float = 1e-4
    seed: int = 0
    # stop once the loss improves by less than this fraction over a window
    loss_tolerance: float = 1e-8
    stall_window: int = 20

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be > 0")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        if self.anchor_pin_mode not in ("hard", "soft"):
            raise ValueError(f"unknown anchor_pin_mode {self.anchor_pin_mode!r}")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be > 0")
        if self.loss_tolerance < 0 or self.stall_window < 1:
            raise ValueError("loss_tolerance must be >= 0 and stall_window >= 1")


@dataclass(frozen=True)
class LossBreakdown:
    range_term: float
    angle_term: float

    @property
    def total(self) -> float:
        return self.range_term + self.angle_term


class SolveResult(NamedTuple):
    positions: np.ndarray  # flat, length 3n
    loss: LossBreakdown
    iterations: int
    converged: bool
    history: list


def as_points(X) -> np.ndarray:
    return np.asarray(X, dtype=float).reshape(-1, 3)


# -- single-measurement terms ------------------------------------------------


def euclidean_range(X, i: int, j: int) -> float:
    P = as_points(X)
    return float(np.linalg.norm(P[i] - P[j]))


def angle_residual_naive(X, m: Measurement) -> float:
    """Squared azimuth error using single-argument arctan.

    Kept only as a reference for the non-convexity comparison; it cannot
    tell ``d`` from ``-d``.
    """
    P = as_points(X)
    d = P[m.dst] - P[m.src]
    if d[0] == 0 and d[1] == 0:
        raise ValueError(f"coincident nodes on edge {m.src}->{m.dst}")
    with np.errstate(divide="ignore"):
        pred = np.arctan(d[1] / d[0])
    return float((m.azimuth - pred) ** 2)


def angle_loss(X, m: Measurement) -> float:
    """``1 - cos(az_measured - atan2(dy, dx))`` for one measurement, in [0, 2]."""
    P = as_points(X)
    d = P[m.dst] - P[m.src]
    if np.hypot(d[0], d[1]) < RXY_MIN:
        log.debug("event=degenerate_azimuth edge=%d->%d", m.src, m.dst)
        return 0.0
    return float(1.0 - np.cos(m.azimuth - np.arctan2(d[1], d[0])))


def elevation_loss(X, m: Measurement) -> float:
    P = as_points(X)
    d = P[m.dst] - P[m.src]
    r = np.linalg.norm(d)
    if r == 0:
        raise ValueError(f"zero range on edge {m.src}->{m.dst}")
    return float(1.0 - np.cos(m.elevation - np.arcsin(np.clip(d[2] / r, -1.0, 1.0))))


# -- vectorised joint loss ---------------------------------------------------


def _range_norm(a: MeasurementArrays) -> float:
    return float(np.sum(a.range[a.w_range > 0]))


def _loss_state(a: MeasurementArrays, P: np.ndarray, norm: float):
    """Loss plus the intermediates the gradient reuses."""
    # predicted angles enter only through their cos/sin, taken from coordinate ratios
    d = P[a.dst] - P[a.src]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    rxy2 = dx * dx + dy * dy
    r = np.sqrt(rxy2 + dz * dz)
    rxy = np.sqrt(rxy2)

    res = a.range - r
    range_term = float(a.w_range @ (res * res)) / norm if norm > 0 else 0.0

    w = a.w_angle * (rxy >= RXY_MIN)
    inv_rxy = 1.0 / np.maximum(rxy, RXY_MIN)
    inv_r = 1.0 / np.where(r > 0, r, 1.0)
    cp, sp_ = dx * inv_rxy, dy * inv_rxy  # cos, sin of predicted azimuth
    ce, se = rxy * inv_r, dz * inv_r  # cos, sin of predicted elevation
    # 1 - cos(delta) as half the squared chord between unit vectors, exact near zero
    e1, e2, e3, e4 = a.cos_az - cp, a.sin_az - sp_, a.cos_el - ce, a.sin_el - se
    angle_term = 0.5 * float(w @ (e1 * e1 + e2 * e2 + e3 * e3 + e4 * e4))
    return LossBreakdown(range_term, angle_term), (d, rxy2, r, res, w, inv_rxy, inv_r, cp, sp_, ce, se)


def _gradient(a: MeasurementArrays, state, n: int, norm: float) -> np.ndarray:
    d, rxy2, r, res, w, inv_rxy, inv_r, cp, sp_, ce, se = state
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    # gradient with respect to d = X[dst] - X[src]
    coef = np.where(r > 0, (-2.0 / norm) * a.w_range * res * inv_r, 0.0) if norm > 0 else np.zeros_like(r)
    k_az = -w * (a.sin_az * cp - a.cos_az * sp_) * inv_rxy * inv_rxy  # dL/d(az_pred) / rxy^2
    fac = -w * (a.sin_el * ce - a.cos_el * se) * inv_r * inv_r * inv_rxy  # dL/d(el_pred) / (r^2 rxy)
    cz = coef - fac * dz
    gd = np.empty_like(d)
    gd[:, 0] = cz * dx - k_az * dy
    gd[:, 1] = cz * dy + k_az * dx
    gd[:, 2] = coef * dz + fac * rxy2

    flat = gd.ravel()
    G = np.bincount(a.dst_xyz, weights=flat, minlength=3 * n) - np.bincount(a.src_xyz, weights=flat, minlength=3 * n)
    return G.reshape(-1, 3)


def _terms(a: MeasurementArrays, P: np.ndarray, want_grad: bool, norm: float | None = None):
    if norm is None:
        norm = _range_norm(a)
    loss, state = _loss_state(a, P, norm)
    return loss, (_gradient(a, state, len(P), norm) if want_grad else None)


def joint_loss(topo: Topology, X) -> LossBreakdown:
    """Normalised range misfit plus the ``1 - cos`` azimuth and elevation terms."""
    P = as_points(X)
    if len(P) != topo.n:
        raise ValueError(f"state has {len(P)} nodes, topology has {topo.n}")
    return _terms(topo.arrays, P, want_grad=False)[0]


def joint_gradient(topo: Topology, X) -> np.ndarray:
    """Analytic gradient of :func:`joint_loss`, flat length ``3n``."""
    P = as_points(X)
    if len(P) != topo.n:
        raise ValueError(f"state has {len(P)} nodes, topology has {topo.n}")
    return _terms(topo.arrays, P, want_grad=True)[1].ravel()


# -- solver ------------------------------------------------------------------


def solve_positions(topo: Topology, init, cfg: SolverConfig = SolverConfig()) -> SolveResult:
    """Gradient descent on :func:`joint_loss` with anchors pinned.

    The backtracking rule tries a Barzilai-Borwein step first and halves it
    until the Armijo condition holds, so accepted losses never increase.
    """
    a = topo.arrays
    P = as_points(init).copy()
    if len(P) != topo.n:
        raise ValueError(f"init has {len(P)} nodes, topology has {topo.n}")
    anchor_ids, anchor_pos = topo.anchor_array()
    hard = cfg.anchor_pin_mode == "hard" and len(anchor_ids) > 0
    soft = cfg.anchor_pin_mode == "soft" and len(anchor_ids) > 0
    if hard:
        P[anchor_ids] = anchor_pos
    free = np.ones((topo.n, 1))
    if hard:
        free[anchor_ids] = 0.0

    norm = _range_norm(a)
    n = topo.n

    def value(Q):
        loss, state = _loss_state(a, Q, norm)
        f = loss.total
        if soft:
            diff = Q[anchor_ids] - anchor_pos
            f += cfg.anchor_penalty * float(np.sum(diff * diff))
        return f, loss, state

    def gradient(Q, state):
        G = _gradient(a, state, n, norm)
        if soft:
            np.add.at(G, anchor_ids, 2.0 * cfg.anchor_penalty * (Q[anchor_ids] - anchor_pos))
        return G * free

    f, loss, state = value(P)
    if not np.isfinite(f):
        raise SolverError("non-finite loss at initial state")
    G = gradient(P, state)
    history = [f]
    converged = False
    step = None
    prev_P = prev_G = None
    for it in range(1, cfg.max_iterations + 1):
        gnorm = float(np.sqrt(np.sum(G * G)))
        if gnorm <= cfg.gradient_tolerance:
            converged = True
            break
        if cfg.step_rule == "fixed":
            P = P - cfg.initial_step * G
            f, loss, state = value(P)
            if not np.isfinite(f):
                raise SolverError(f"non-finite loss at iteration {it}")
            G = gradient(P, state)
            history.append(f)
            continue

        if prev_P is None:
            t = cfg.initial_step / max(float(np.max(np.abs(G))), 1e-300)
        else:
            s = (P - prev_P).ravel()
            y = (G - prev_G).ravel()
            sy = float(s @ y)
            t = float(s @ s) / sy if sy > 0 else 2.0 * step
            # the short BB step is the first fallback when the long one fails
            short = sy / float(y @ y) if sy > 0 else None
        gg = gnorm * gnorm
        accepted = False
        for _ in range(80):
            cand = P - t * G
            fc, lc, sc = value(cand)
            if np.isfinite(fc) and fc <= f - cfg.armijo * t * gg:
                accepted = True
                break
            if prev_P is not None and short is not None and short < t:
                t, short = short, None
            else:
                t *= 0.5
        if not accepted:
            # no decrease representable in floating point: treat as converged
            converged = True
            break
        prev_P, prev_G = P, G
        P, f, loss, step = cand, fc, lc, t
        G = gradient(P, sc)
        history.append(f)
        w = cfg.stall_window
        if len(history) > w and history[-w - 1] - f <= cfg.loss_tolerance * abs(f):
            converged = True
            break
    else:
        converged = float(np.linalg.norm(G)) <= cfg.gradient_tolerance
    return SolveResult(P.ravel().copy(), loss, len(history) - 1, converged, history)


# -- initialisation ----------------------------------------------------------


def _tree_adjacency(n: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    for nb in adj:
        nb.sort()
    return adj


def spanning_tree_init(topo: Topology, tree, offsets: Mapping[int, Orientation] | Sequence[Orientation] | None = None) -> np.ndarray:
    """Dead-reckon positions along a spanning tree from its root at the origin.

    ``tree`` needs ``edges`` (objects with ``i``/``j`` or plain pairs) and a
    ``root``.  Each child is placed at ``parent + r * u(az, el)`` using the
    parent's measurement of the child; the child's reverse measurement is
    used (negated) when the parent's angle is missing.
    """
    n = topo.n
    pairs = [(e.i, e.j) if hasattr(e, "i") else tuple(e) for e in tree.edges]
    adj = _tree_adjacency(n, pairs)
    by_key = {m.key: m for m in topo.measurements}

    def offset(k):
        if offsets is None:
            return Orientation()
        return offsets[k]

    P = np.zeros((n, 3))
    seen = np.zeros(n, dtype=bool)
    root = int(tree.root)
    seen[root] = True
    queue = deque([root])
    while queue:
        p = queue.popleft()
        for c in adj[p]:
            if seen[c]:
                continue
            fwd, bwd = by_key.get((p, c)), by_key.get((c, p))
            if fwd is not None and fwd.angle_valid:
                az, el = transform_aoa(fwd.azimuth, fwd.elevation, offset(p))
                P[c] = P[p] + fwd.range * unit_from_angles(az, el)
            elif bwd is not None and bwd.angle_valid:
                az, el = transform_aoa(bwd.azimuth, bwd.elevation, offset(c))
                P[c] = P[p] - bwd.range * unit_from_angles(az, el)
            else:
                raise SolverError(f"cannot dead-reckon along edge {p}-{c}: no valid angle")
            seen[c] = True
            queue.append(c)
    if not seen.all():
        raise SolverError(f"tree is disconnected: nodes {np.flatnonzero(~seen).tolist()} unreachable")
    return P.ravel()


def displacement_init(topo: Topology, pinned: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    """Linear least-squares positions from the measured displacement vectors.

    Every angle-bearing measurement ``i -> j`` gives ``X[j] - X[i] ~ r u``;
    on a tree this reduces to dead reckoning.  ``pinned`` fixes some nodes;
    any component of the angle graph without a pinned node gets its lowest
    id placed at the origin.  Nodes without angle edges stay at the origin.
    """
    n = topo.n
    a = topo.arrays
    sel = a.angle_valid
    src, dst = a.src[sel], a.dst[sel]
    b = a.range[sel, None] * unit_from_angles(a.azimuth[sel], a.elevation[sel])

    pinned = {int(k): np.asarray(v, dtype=float) for k, v in (pinned or {}).items()}
    # normal equations: L X = B with L the graph Laplacian
    small = n <= DENSE_INIT_LIMIT
    if small:
        L = np.zeros((n, n))
        np.add.at(L, (src, dst), -1.0)
        np.add.at(L, (dst, src), -1.0)
        L[np.diag_indices(n)] = -L.sum(axis=1)
        ncomp, labels = connected_components(L != 0, directed=False)
    else:
        deg = np.bincount(src, minlength=n) + np.bincount(dst, minlength=n)
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        L = sp.coo_matrix((-np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr() + sp.diags(deg.astype(float))
        ncomp, labels = connected_components(L, directed=False)
    fixed = dict(pinned)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        if not any(int(k) in pinned for k in members):
            fixed[int(members[0])] = np.zeros(3)

    B = np.zeros((n, 3))
    for k in range(3):
        B[:, k] = np.bincount(dst, weights=b[:, k], minlength=n) - np.bincount(src, weights=b[:, k], minlength=n)

    fixed_ids = np.array(sorted(fixed), dtype=np.int64)
    free_ids = np.setdiff1d(np.arange(n), fixed_ids)
    P = np.zeros((n, 3))
    P[fixed_ids] = np.array([fixed[k] for k in fixed_ids]).reshape(-1, 3)
    if len(free_ids) and small:
        rhs = B[free_ids] - L[np.ix_(free_ids, fixed_ids)] @ P[fixed_ids]
        P[free_ids] = np.linalg.solve(L[np.ix_(free_ids, free_ids)], rhs)
    elif len(free_ids):
        Lff = L[free_ids][:, free_ids].tocsc()
        rhs = B[free_ids] - L[free_ids][:, fixed_ids] @ P[fixed_ids]
        sol = spsolve(Lff, rhs)
        P[free_ids] = np.asarray(sol).reshape(-1, 3)
    return P.ravel()


def mds_init(topo: Topology, dim: int = 3) -> np.ndarray:
    """Classical MDS on shortest-path distances of the range graph (MDS-MAP)."""
    n = topo.n
    a = topo.arrays
    W = sp.coo_matrix((a.range, (a.src, a.dst)), shape=(n, n)).tocsr()
    D = shortest_path(W, directed=False)
    finite = np.isfinite(D)
    if not finite.all():
        D = np.where(finite, D, D[finite].max() * 2.0 if finite.any() else 1.0)
    J = np.eye(n) - 1.0 / n
    Bm = -0.5 * J @ (D * D) @ J
    vals, vecs = np.linalg.eigh(Bm)
    order = np.argsort(vals)[::-1][:dim]
    Y = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    P = np.zeros((n, 3))
    P[:, :dim] = Y
    return P.ravel()


def random_init(n: int, bounds: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    return (rng.uniform(0.0, 1.0, size=(n, 3)) * np.asarray(bounds, dtype=float)).ravel()


def solve_with_restarts(
    topo: Topology,
    bounds: Sequence[float],
    cfg: SolverConfig = SolverConfig(),
    restarts: int = 5,
    extra_inits: Sequence[np.ndarray] = (),
) -> SolveResult:
    """Best-loss solve over seeded uniform initialisations plus any given starts."""
    rng = np.random.default_rng([cfg.seed, 1])
    inits = list(extra_inits) + [random_init(topo.n, bounds, rng) for _ in range(restarts)]
    best = None
    for x0 in inits:
        res = solve_positions(topo, x0, cfg)
        if best is None or res.loss.total < best.loss.total:
            best = res
    return best
