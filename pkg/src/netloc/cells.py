"""Spatial cell partitioning for large networks.

Each cell (its nodes plus a halo of graph neighbours) is localized on its
own with a local yaw gauge, which keeps heading drift confined to one cell.
The cells are then stitched into one frame by fitting a yaw rotation and a
translation per cell, so that nodes shared between cells and the anchors
agree.  The stitched result is a starting point for a global polish.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .objective import SolverConfig, displacement_init, solve_positions
from .orientation import estimate_offsets_yaw, rotate_yaw, to_global_frame, yaw_corrections
from .topology import Position, Topology, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CellPlan:
    keys: list[tuple[int, int]]  # grid index of each cell, row-major order
    core: list[np.ndarray]  # node ids owned by each cell
    members: list[np.ndarray]  # core plus halo, sorted
    owner: np.ndarray  # (n,) owning cell of each node


@dataclass
class CellSolution:
    ids: np.ndarray  # member ids with a usable local solution
    positions: np.ndarray  # (k, 3) in the cell's own frame
    yaw: np.ndarray  # (k,) in the cell's own frame
    iterations: int


def _adjacency(topo: Topology) -> sp.csr_matrix:
    a = topo.arrays
    A = sp.coo_matrix((np.ones(len(a.src)), (a.src, a.dst)), shape=(topo.n, topo.n)).tocsr()
    return ((A + A.T) > 0).astype(np.int8).tocsr()


def partition(X, cell_size: float, topo: Topology, halo_hops: int = 2) -> CellPlan:
    """Square xy cells over ``X``; each cell's halo is its ``halo_hops``-hop graph neighbourhood."""
    if not cell_size > 0:
        raise ValueError("cell_size must be > 0")
    P = np.asarray(X, dtype=float).reshape(topo.n, 3)
    g = np.floor((P[:, :2] - P[:, :2].min(axis=0)) / cell_size).astype(np.int64)
    keys = sorted({(int(i), int(j)) for i, j in g})
    index = {k: c for c, k in enumerate(keys)}
    owner = np.array([index[(int(i), int(j))] for i, j in g], dtype=np.int64)
    adj = _adjacency(topo)
    core, members = [], []
    for c in range(len(keys)):
        ids = np.flatnonzero(owner == c)
        mask = np.zeros(topo.n, dtype=bool)
        mask[ids] = True
        frontier = mask.copy()
        for _ in range(halo_hops):
            frontier = (adj @ frontier.astype(np.int8)) > 0
            frontier &= ~mask
            mask |= frontier
        core.append(ids)
        members.append(np.flatnonzero(mask))
    return CellPlan(keys, core, members, owner)


def subtopology(topo: Topology, ids: np.ndarray) -> Topology:
    """Measurements among ``ids``, renumbered ``0..len(ids)-1``; weights are kept."""
    a = topo.arrays
    local = -np.ones(topo.n, dtype=np.int64)
    local[ids] = np.arange(len(ids))
    keep = np.flatnonzero((local[a.src] >= 0) & (local[a.dst] >= 0))
    ms = [replace(topo.measurements[k], src=int(local[a.src[k]]), dst=int(local[a.dst[k]])) for k in keep]
    sub = Topology.build(len(ids), ms)
    if topo.w_range is not None:
        sub = sub.with_weights(a.w_range[keep], a.w_angle[keep])
    return sub


def solve_cell(topo: Topology, roll_pitch, ids: np.ndarray, core: np.ndarray, cfg: SolverConfig,
               refine_rounds: int = 3) -> CellSolution:
    """Local yaw estimate, displacement init and solve on one cell.

    Only the connected piece holding most of the core is kept; the rest of
    the members are dropped from the result.
    """
    sub = subtopology(topo, ids)
    adj = _adjacency(sub)
    _, labels = connected_components(adj, directed=False)
    core_local = np.searchsorted(ids, core)
    main = np.bincount(labels[core_local]).argmax()
    keep = np.flatnonzero(labels == main)
    if len(keep) < len(ids):
        ids = ids[keep]
        sub = subtopology(sub, keep)
    rp = np.asarray(roll_pitch, dtype=float)[ids]
    est = estimate_offsets_yaw(sub, rp, reference=0, allow_disconnected=True)
    yaw = est.as_array()[:, 2].copy()
    g = to_global_frame(sub, est)
    res = solve_positions(g, displacement_init(g), cfg)
    iterations = res.iterations
    for _ in range(refine_rounds):
        delta = yaw_corrections(g, res.positions)
        if not np.any(np.abs(delta) > 1e-12):
            break
        g = rotate_yaw(g, delta)
        yaw = yaw + delta
        res = solve_positions(g, res.positions, cfg)
        iterations += res.iterations
    return CellSolution(ids, res.positions.reshape(-1, 3), wrap_angle(yaw), iterations)


def _rows_for(cell: int, Y: np.ndarray, ncells: int):
    """Sparse design rows mapping cell parameters (a, b, tx, ty, tz) to world xyz."""
    k = len(Y)
    base = 5 * cell
    r = np.arange(k)
    rows = np.concatenate([3 * r, 3 * r, 3 * r, 3 * r + 1, 3 * r + 1, 3 * r + 1, 3 * r + 2])
    cols = np.concatenate([np.full(k, base), np.full(k, base + 1), np.full(k, base + 2),
                           np.full(k, base), np.full(k, base + 1), np.full(k, base + 3),
                           np.full(k, base + 4)])
    vals = np.concatenate([Y[:, 0], -Y[:, 1], np.ones(k), Y[:, 1], Y[:, 0], np.ones(k), np.ones(k)])
    const = np.zeros(3 * k)
    const[2::3] = Y[:, 2]
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * k, 5 * ncells)), const


def stitch(solutions: list[CellSolution], owner: np.ndarray, anchors: Mapping[int, Position],
           anchor_weight: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Fit one yaw rotation and translation per cell.

    Shared nodes are pulled together between each cell and the node's
    owner; anchors are pulled to their known positions.  Returns
    ``(yaw per cell, translation per cell, placed mask, RMS shared-node gap)``.
    A first linear pass fits a similarity per cell, its rotation is
    normalised to unit scale, and translations are refit with rotations fixed.
    """
    ncells = len(solutions)
    n = len(owner)
    where: list[dict[int, int]] = [dict(zip(s.ids.tolist(), range(len(s.ids)))) for s in solutions]
    home = np.full(n, -1, dtype=np.int64)
    for v in range(n):
        c = int(owner[v])
        if v in where[c]:
            home[v] = c
    for c, s in enumerate(solutions):
        for v in s.ids:
            if home[v] < 0:
                home[v] = c

    blocks, rhs = [], []

    def add(cell, Y, target_cell=None, Yt=None, target=None, w=1.0):
        A, k = _rows_for(cell, Y, ncells)
        if target_cell is not None:
            B, kb = _rows_for(target_cell, Yt, ncells)
            blocks.append(w * (A - B))
            rhs.append(w * (kb - k))
        else:
            blocks.append(w * A)
            rhs.append(w * (target.ravel() - k))

    for c, s in enumerate(solutions):
        shared = [(i, v) for i, v in enumerate(s.ids.tolist()) if home[v] >= 0 and home[v] != c]
        if shared:
            li = np.array([i for i, _ in shared])
            hv = [(int(home[v]), where[int(home[v])][v]) for _, v in shared]
            for h in sorted({h for h, _ in hv}):
                pick = [k for k, (hh, _) in enumerate(hv) if hh == h]
                add(c, s.positions[li[pick]], h, solutions[h].positions[[hv[k][1] for k in pick]])
        anc = [(i, v) for i, v in enumerate(s.ids.tolist()) if v in anchors]
        if anc:
            li = np.array([i for i, _ in anc])
            tgt = np.array([anchors[v].as_array() for _, v in anc])
            add(c, s.positions[li], target=tgt, w=anchor_weight)

    # gauge: without two anchors the first cell fixes rotation, without any also translation
    gauge_rows = []
    n_anchor = sum(1 for v in anchors if 0 <= v < n and home[v] >= 0)
    if n_anchor < 2:
        gauge_rows += [(0, 1.0), (1, 0.0)]
    if n_anchor < 1:
        gauge_rows += [(2, 0.0), (3, 0.0), (4, 0.0)]
    for col, val in gauge_rows:
        blocks.append(sp.csr_matrix(([1.0], ([0], [col])), shape=(1, 5 * ncells)))
        rhs.append(np.array([val]))

    A = sp.vstack(blocks).tocsr()
    b = np.concatenate(rhs)
    N = (A.T @ A).toarray()
    theta = np.linalg.lstsq(N, A.T @ b, rcond=None)[0].reshape(ncells, 5)
    yaw = np.arctan2(theta[:, 1], theta[:, 0])

    # refit translations with unit rotations held fixed
    c_, s_ = np.cos(yaw), np.sin(yaw)
    fixed = np.zeros(5 * ncells)
    fixed[0::5], fixed[1::5] = c_, s_
    tcols = np.concatenate([5 * np.arange(ncells)[:, None] + [2, 3, 4]]).ravel()
    rot_part = A[:, np.setdiff1d(np.arange(5 * ncells), tcols)] @ fixed[np.setdiff1d(np.arange(5 * ncells), tcols)]
    At = A[:, tcols]
    Nt = (At.T @ At).toarray()
    t = np.linalg.lstsq(Nt, At.T @ (b - rot_part), rcond=None)[0].reshape(ncells, 3)
    resid = A @ np.concatenate([np.c_[c_, s_, t]]).ravel() - b
    rms = float(np.sqrt(np.mean(resid * resid))) if len(resid) else 0.0
    return yaw, t, home, rms


def place(solutions: list[CellSolution], home: np.ndarray, yaw: np.ndarray, t: np.ndarray,
          X_fallback: np.ndarray, yaw_fallback: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World positions and yaws of every node from its home cell's transform."""
    X = np.asarray(X_fallback, dtype=float).reshape(-1, 3).copy()
    Y = np.asarray(yaw_fallback, dtype=float).copy()
    for c, s in enumerate(solutions):
        mine = home[s.ids] == c
        if not mine.any():
            continue
        cs, sn = np.cos(yaw[c]), np.sin(yaw[c])
        R = np.array([[cs, -sn, 0.0], [sn, cs, 0.0], [0.0, 0.0, 1.0]])
        X[s.ids[mine]] = s.positions[mine] @ R.T + t[c]
        Y[s.ids[mine]] = wrap_angle(s.yaw[mine] + yaw[c])
    return X, Y
