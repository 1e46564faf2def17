"""Infinitesimal rigidity of mixed range/azimuth/elevation frameworks.

Rows of the rigidity matrix are constraint gradients with respect to the
stacked node coordinates; the null space of ``R`` (equivalently of the
``dim*n`` Gram matrix ``R^T R``) holds the motions that leave every
constraint unchanged.  Angle constraints are taken in a shared frame, so a
framework containing them has only translations as trivial motions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .edge_select import UnionFind
from .topology import Topology

REL_EPS = 1e-8
ABS_EPS = 1e-12
CLUSTER_TOL = 1e-6


class RigidityError(ValueError):
    pass


@dataclass(frozen=True)
class RigidityMatrix:
    matrix: np.ndarray  # (rows, dim*n)
    rows: tuple[tuple[str, int, int], ...]  # (kind, src, dst)
    positions: np.ndarray  # (n, dim)
    dim: int = 3

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def has_angles(self) -> bool:
        return any(kind != "range" for kind, _, _ in self.rows)


@dataclass
class RigidityReport:
    eigenvalues: np.ndarray
    dof: int
    epsilon: float
    subgraphs: list[list[int]]
    critical_edges: list[tuple[int, int]] = field(default_factory=list)
    trivial: int = 3
    constraint_zero_count: int = 0

    @property
    def rigid(self) -> bool:
        return self.dof <= self.trivial

    def to_dict(self) -> dict:
        return {
            "rigid": self.rigid,
            "dof": self.dof,
            "trivial_motions": self.trivial,
            "epsilon": self.epsilon,
            "smallest_eigenvalues": [float(v) for v in np.sort(self.eigenvalues)[:10]],
            "constraint_space_zero_eigenvalues": self.constraint_zero_count,
            "subgraphs": self.subgraphs,
            "critical_edges": [list(e) for e in self.critical_edges],
        }


def _constraint_rows(d: np.ndarray, dim: int, with_angle: bool):
    """Gradients of range / azimuth / elevation w.r.t. the displacement ``d``."""
    r = float(np.linalg.norm(d))
    rows = [("range", d / r)]
    if with_angle:
        rxy2 = float(d[0] ** 2 + d[1] ** 2)
        if rxy2 == 0:
            raise RigidityError("azimuth undefined for a vertical pair")
        g = np.zeros(dim)
        g[0], g[1] = -d[1] / rxy2, d[0] / rxy2
        rows.append(("azimuth", g))
        if dim == 3:
            rxy = np.sqrt(rxy2)
            ez = np.array([0.0, 0.0, 1.0])
            rows.append(("elevation", (ez * r * r - d[2] * d) / (r * r * rxy)))
    return rows


def build_rigidity_matrix(X, topo: Topology, dim: int = 3) -> RigidityMatrix:
    """One range row per measurement plus azimuth (and, in 3D, elevation) rows where the angle is valid."""
    if dim not in (2, 3):
        raise ValueError("dim must be 2 or 3")
    P = np.asarray(X, dtype=float).reshape(topo.n, -1)[:, :dim]
    blocks, labels = [], []
    for m in topo.measurements:
        d = P[m.dst] - P[m.src]
        if not np.any(d):
            raise RigidityError(f"coincident positions on edge {m.src}->{m.dst}")
        for kind, g in _constraint_rows(d, dim, m.angle_valid):
            row = np.zeros(dim * topo.n)
            row[dim * m.dst: dim * m.dst + dim] = g
            row[dim * m.src: dim * m.src + dim] = -g
            blocks.append(row)
            labels.append((kind, m.src, m.dst))
    M = np.array(blocks).reshape(len(blocks), dim * topo.n)
    return RigidityMatrix(M, tuple(labels), P, dim)


def _threshold(vals: np.ndarray, epsilon: float | None) -> float:
    if epsilon is not None:
        if not epsilon > 0:
            raise ValueError("epsilon must be > 0")
        return float(epsilon)
    top = float(np.max(np.abs(vals))) if len(vals) else 0.0
    return max(REL_EPS * top, ABS_EPS)


def _spectrum(R: np.ndarray, cols: int):
    gram = R.T @ R if R.shape[0] else np.zeros((cols, cols))
    try:
        vals, vecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RigidityError(f"eigensolver did not converge: {exc}") from exc
    return vals, vecs


def dof(R: RigidityMatrix, epsilon: float | None = None) -> tuple[int, np.ndarray]:
    """Count near-zero eigenvalues of ``R^T R``; returns ``(dof, ascending eigenvalues)``.

    ``epsilon=None`` uses ``1e-8 * max eigenvalue`` (floored at 1e-12).
    """
    vals, _ = _spectrum(R.matrix, R.dim * R.n)
    eps = _threshold(vals, epsilon)
    return int(np.sum(np.abs(vals) < eps)), vals


def trivial_motion_count(R: RigidityMatrix) -> int:
    if R.has_angles:
        return R.dim
    return R.dim + (3 if R.dim == 3 else 1)


def _trivial_basis(P: np.ndarray, dim: int, with_rotations: bool) -> np.ndarray:
    n = P.shape[0]
    vecs = []
    for k in range(dim):
        t = np.zeros((n, dim))
        t[:, k] = 1.0
        vecs.append(t.ravel())
    if with_rotations:
        c = P - P.mean(axis=0)
        if dim == 2:
            vecs.append(np.stack([-c[:, 1], c[:, 0]], axis=1).ravel())
        else:
            for axis in np.eye(3):
                vecs.append(np.cross(axis, c).ravel())
    B = np.array(vecs).T
    q, s, _ = np.linalg.svd(B, full_matrices=False)
    return q[:, s > 1e-12 * max(s.max(), 1.0)]


def _cluster(features: np.ndarray) -> list[list[int]]:
    n = features.shape[0]
    if features.size == 0:
        return [list(range(n))]
    scale = float(np.max(np.abs(features)))
    tol = CLUSTER_TOL * max(scale, 1e-300)
    reps: list[np.ndarray] = []
    groups: list[list[int]] = []
    for v in range(n):
        for g, rep in enumerate(reps):
            if np.max(np.abs(features[v] - rep)) <= tol:
                groups[g].append(v)
                break
        else:
            reps.append(features[v])
            groups.append([v])
    return groups


def decompose(R: RigidityMatrix, epsilon: float | None = None) -> tuple[list[list[int]], np.ndarray]:
    """Partition nodes into rigid subgraphs from the non-trivial null-space motions.

    Returns ``(subgraphs, motions)`` where ``motions`` has shape
    ``(k, n, dim)``, one displacement field per non-trivial motion.  Nodes
    whose displacement agrees across every motion share a subgraph.
    """
    vals, vecs = _spectrum(R.matrix, R.dim * R.n)
    eps = _threshold(vals, epsilon)
    null = vecs[:, np.abs(vals) < eps]
    T = _trivial_basis(R.positions, R.dim, with_rotations=not R.has_angles)
    residual = null - T @ (T.T @ null)
    u, s, _ = np.linalg.svd(residual, full_matrices=False) if residual.size else (residual, np.zeros(0), None)
    motions = u[:, s > 1e-6] if residual.size else residual
    k = motions.shape[1]
    shaped = motions.T.reshape(k, R.n, R.dim)
    features = shaped.transpose(1, 0, 2).reshape(R.n, k * R.dim)
    return _cluster(features), shaped


def critical_edges(
    subgraphs: Sequence[Sequence[int]],
    candidates: Sequence[tuple[int, int]],
    last_positions,
) -> list[tuple[int, int]]:
    """Candidate pairs that join different subgraphs, nearest first."""
    if len(subgraphs) < 2:
        return []
    label = {}
    for g, members in enumerate(subgraphs):
        for v in members:
            label[v] = g
    P = np.asarray(last_positions, dtype=float).reshape(len(label), -1)
    cross = {(min(i, j), max(i, j)) for i, j in candidates if label[i] != label[j]}
    return sorted(cross, key=lambda p: (float(np.linalg.norm(P[p[0]] - P[p[1]])), p))


def rigidity_report(X, topo: Topology, dim: int = 3, epsilon: float | None = None, candidates: Sequence[tuple[int, int]] = ()) -> RigidityReport:
    """Dense analysis: spectrum, DoF, decomposition and critical edges."""
    R = build_rigidity_matrix(X, topo, dim)
    count, vals = dof(R, epsilon)
    subgraphs, _ = decompose(R, epsilon)
    crit = critical_edges(subgraphs, candidates, R.positions)
    # zero eigenvalues of the constraint-space Gram matrix R R^T
    rank = R.dim * R.n - count
    return RigidityReport(vals, count, _threshold(vals, epsilon), subgraphs, crit, trivial_motion_count(R), R.matrix.shape[0] - rank)


def contracted_report(X, topo: Topology, epsilon: float | None = None, candidates: Sequence[tuple[int, int]] = ()) -> RigidityReport:
    """3D analysis that first merges nodes joined by angle-bearing measurements.

    A valid range+azimuth+elevation measurement pins the full relative
    displacement of its two nodes, so each connected component of the
    angle graph moves as one translating body.  Only range-only
    measurements between bodies remain, which keeps the eigenproblem at
    ``3 * bodies`` columns.  The DoF and partition equal the dense result.
    """
    n = topo.n
    P = np.asarray(X, dtype=float).reshape(n, 3)
    a = topo.arrays
    uf = UnionFind(n)
    for s, d, ok in zip(a.src, a.dst, a.angle_valid):
        if ok:
            uf.union(int(s), int(d))
    bodies = uf.components()
    body_of = np.empty(n, dtype=np.int64)
    for b, members in enumerate(bodies):
        body_of[members] = b
    k = len(bodies)
    rows = []
    for s, d, ok in zip(a.src, a.dst, a.angle_valid):
        bs, bd = body_of[s], body_of[d]
        if ok or bs == bd:
            continue
        diff = P[d] - P[s]
        r = np.linalg.norm(diff)
        if r == 0:
            raise RigidityError(f"coincident positions on edge {s}->{d}")
        row = np.zeros(3 * k)
        row[3 * bd: 3 * bd + 3] = diff / r
        row[3 * bs: 3 * bs + 3] = -diff / r
        rows.append(row)
    M = np.array(rows).reshape(len(rows), 3 * k)
    vals, vecs = _spectrum(M, 3 * k)
    eps = _threshold(vals, epsilon)
    count = int(np.sum(np.abs(vals) < eps))
    if k == 1:
        subgraphs = [list(range(n))]
    else:
        null = vecs[:, np.abs(vals) < eps]
        T = np.zeros((3 * k, 3))
        for c in range(3):
            T[c::3, c] = 1.0 / np.sqrt(k)
        residual = null - T @ (T.T @ null)
        u, s, _ = np.linalg.svd(residual, full_matrices=False)
        motions = u[:, s > 1e-6]
        feats = motions.T.reshape(motions.shape[1], k, 3).transpose(1, 0, 2).reshape(k, -1)
        groups = _cluster(feats)
        subgraphs = sorted(sorted(v for b in g for v in bodies[b]) for g in groups)
    has_angles = bool(np.any(a.angle_valid))
    trivial = 3 if has_angles else 6
    if not has_angles:
        # without any angle rows bodies are single nodes and rotations are free;
        # fall back to the dense analysis which accounts for them
        return rigidity_report(P, topo, 3, epsilon, candidates)
    crit = critical_edges(subgraphs, candidates, P)
    return RigidityReport(vals, count, eps, subgraphs, crit, trivial, 0)
