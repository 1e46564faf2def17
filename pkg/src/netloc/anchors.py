"""Static and virtual anchors, and rigid alignment into the anchor frame."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .topology import Position, Topology

STATIONARY_SPEED = 0.05  # m/s; both below this counts as agreement
DEFAULT_MARGIN = 0.05
DEFAULT_BOOST = 10.0


class AnchorError(ValueError):
    pass


class AlignmentError(AnchorError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    id: int
    t: np.ndarray  # (k,) seconds
    samples: np.ndarray  # (k, 3) meters

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        xyz = np.asarray(self.samples, dtype=float).reshape(-1, 3)
        if len(t) < 2:
            raise AnchorError("a trajectory needs at least 2 samples")
        if len(t) != len(xyz):
            raise AnchorError("timestamps and samples differ in length")
        if np.any(np.diff(t) <= 0):
            raise AnchorError("timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "samples", xyz)

    def at(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return np.stack([np.interp(times, self.t, self.samples[:, c]) for c in range(3)], axis=-1)

    def to_dict(self) -> dict:
        return {"id": self.id, "samples": [[float(t), *map(float, p)] for t, p in zip(self.t, self.samples)]}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        a = np.asarray(d["samples"], dtype=float).reshape(-1, 4)
        return cls(int(d["id"]), a[:, 0], a[:, 1:])


@dataclass(frozen=True)
class AnchorSet:
    static: Mapping[int, Position] = field(default_factory=dict)
    virtual: Mapping[int, tuple[Position, float]] = field(default_factory=dict)

    def __post_init__(self):
        both = set(self.static) & set(self.virtual)
        if both:
            raise AnchorError(f"nodes {sorted(both)} are both static and virtual anchors")
        for k, (_, conf) in self.virtual.items():
            if not 0.0 <= conf <= 1.0:
                raise AnchorError(f"confidence of virtual anchor {k} outside [0, 1]")

    def positions(self) -> dict[int, Position]:
        out = dict(self.static)
        out.update({k: p for k, (p, _) in self.virtual.items()})
        return dict(sorted(out.items()))

    def ids(self) -> list[int]:
        return sorted(self.positions())

    def __len__(self) -> int:
        return len(self.static) + len(self.virtual)

    def with_virtual(self, extra: Mapping[int, tuple[Position, float]]) -> "AnchorSet":
        v = dict(self.virtual)
        v.update(extra)
        return AnchorSet(self.static, v)


def _as_anchor_map(anchors) -> dict[int, Position]:
    if isinstance(anchors, AnchorSet):
        return anchors.positions()
    return {int(k): (v if isinstance(v, Position) else Position.from_array(v)) for k, v in dict(anchors).items()}


# -- trajectory matching -----------------------------------------------------


def trajectory_similarity(a: Trajectory, b: Trajectory, window: float, step: float = 2.0) -> float:
    """Mean over resampled steps of ``cos(da, db) * min(|va|, |vb|) / max(|va|, |vb|)``.

    Uses the last ``window`` seconds both trajectories cover.  A step where
    both are stationary scores 1; a step where only one moves scores 0.
    """
    start = max(a.t[0], b.t[0])
    end = min(a.t[-1], b.t[-1])
    if end - start < window - 1e-9:
        raise AnchorError(f"insufficient overlap: {max(end - start, 0.0):.3f} s < {window} s")
    step = min(step, window)
    nsteps = max(1, int(math.floor(window / step + 1e-9)))
    times = end - window + step * np.arange(nsteps + 1)
    da = np.diff(a.at(times), axis=0)
    db = np.diff(b.at(times), axis=0)
    la = np.linalg.norm(da, axis=1)
    lb = np.linalg.norm(db, axis=1)
    still = STATIONARY_SPEED * step
    both_still = (la < still) & (lb < still)
    moving = (la > 0) & (lb > 0) & ~both_still
    score = np.where(both_still, 1.0, 0.0)
    cos = np.einsum("ij,ij->i", da[moving], db[moving]) / (la[moving] * lb[moving])
    speed = np.minimum(la[moving], lb[moving]) / np.maximum(la[moving], lb[moving])
    score[moving] = np.clip(cos, -1.0, 1.0) * speed
    return float(np.mean(score))


def similarity_matrix(node_trajectories: Mapping[int, Trajectory], camera_tracks: Mapping[int, Trajectory], window: float, step: float = 2.0):
    nodes = sorted(node_trajectories)
    tracks = sorted(camera_tracks)
    S = np.full((len(tracks), len(nodes)), -1.0)
    for r, tk in enumerate(tracks):
        for c, nd in enumerate(nodes):
            try:
                S[r, c] = trajectory_similarity(camera_tracks[tk], node_trajectories[nd], window, step)
            except AnchorError:
                pass
    return tracks, nodes, S


def match_tracks(
    node_trajectories: Mapping[int, Trajectory],
    camera_tracks: Mapping[int, Trajectory],
    threshold: float,
    window: float,
    margin: float = DEFAULT_MARGIN,
    step: float = 2.0,
) -> dict[int, tuple[int, float]]:
    """Greedy track-to-node assignment: ``{track: (node, score)}``.

    A track qualifies when its best node scores at least ``threshold`` and
    beats the runner-up by ``margin``.  Qualifying tracks claim nodes in
    descending score order; a node is claimed at most once.
    """
    if not 0.0 < threshold <= 1.0:
        raise AnchorError("threshold must be in (0, 1]")
    tracks, nodes, S = similarity_matrix(node_trajectories, camera_tracks, window, step)
    offers = []
    for r, tk in enumerate(tracks):
        if not nodes:
            break
        order = np.argsort(-S[r], kind="stable")
        best = S[r, order[0]]
        second = S[r, order[1]] if len(order) > 1 else -1.0
        if best >= threshold and best - second >= margin:
            offers.append((-best, tk, nodes[order[0]]))
    offers.sort()
    taken: dict[int, tuple[int, float]] = {}
    claimed = set()
    for neg, tk, nd in offers:
        if nd in claimed:
            continue
        claimed.add(nd)
        taken[tk] = (nd, float(min(1.0, -neg)))
    return dict(sorted(taken.items()))


def register_virtual_anchors(
    node_trajectories: Mapping[int, Trajectory],
    camera_tracks: Mapping[int, Trajectory],
    threshold: float,
    window: float,
    margin: float = DEFAULT_MARGIN,
    step: float = 2.0,
) -> AnchorSet:
    """Matched nodes become virtual anchors at their track's last camera position."""
    matches = match_tracks(node_trajectories, camera_tracks, threshold, window, margin, step)
    virtual = {
        nd: (Position.from_array(camera_tracks[tk].samples[-1]), score)
        for tk, (nd, score) in matches.items()
    }
    return AnchorSet({}, dict(sorted(virtual.items())))


# -- weighting ---------------------------------------------------------------


def apply_anchor_weights(topo: Topology, anchors, boost: float = DEFAULT_BOOST) -> Topology:
    """Multiply range and angle weights of anchor-incident measurements by ``boost`` and pin the anchors."""
    if boost < 1:
        raise AnchorError("boost must be >= 1")
    amap = _as_anchor_map(anchors)
    bad = [k for k in amap if not 0 <= k < topo.n]
    if bad:
        raise AnchorError(f"unknown anchor ids {bad}")
    a = topo.arrays
    ids = np.array(sorted(amap), dtype=np.int64)
    touch = np.isin(a.src, ids) | np.isin(a.dst, ids)
    factor = np.where(touch, float(boost), 1.0)
    merged = dict(topo.anchors)
    merged.update(amap)
    return topo.with_weights(a.w_range * factor, a.w_angle * factor).with_anchors(merged)


def boost_candidates(candidates, anchor_ids: Sequence[int], boost: float = DEFAULT_BOOST):
    """Divide the selection weight of anchor-incident candidate edges by ``boost``."""
    if boost < 1:
        raise AnchorError("boost must be >= 1")
    ids = set(int(k) for k in anchor_ids)
    return [replace(e, weight=e.weight / boost) if (e.i in ids or e.j in ids) else e for e in candidates]


# -- alignment ---------------------------------------------------------------


def kabsch(A, B, allow_reflection: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``(R, t)`` with ``R @ a + t ~ b`` for corresponding rows."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(A.shape[1])
    if not allow_reflection and np.linalg.det(Vt.T @ U.T) < 0:
        D[-1, -1] = -1.0
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


def _collinear(P: np.ndarray) -> bool:
    if len(P) < 3:
        return True
    s = np.linalg.svd(P - P.mean(axis=0), compute_uv=False)
    return s[1] <= 1e-9 * max(s[0], 1.0)


def align_to_global(X_est, anchors, mode: str = "auto") -> tuple[np.ndarray, float, np.ndarray]:
    """Rigidly move an estimate so its anchor nodes land on their known positions.

    ``mode`` is ``translation``, ``yaw`` (rotation about z plus translation),
    ``full`` or ``auto`` (1 anchor: translation, 2 or collinear: yaw, else
    full).  Returns ``(aligned flat positions, RMS anchor residual, R)``.
    """
    amap = _as_anchor_map(anchors)
    if not amap:
        raise AlignmentError("alignment needs at least one anchor")
    P = np.asarray(X_est, dtype=float).reshape(-1, 3)
    ids = sorted(amap)
    if max(ids) >= len(P):
        raise AlignmentError(f"anchor id {max(ids)} outside estimate of {len(P)} nodes")
    est = P[ids]
    known = np.array([amap[k].as_array() for k in ids])
    if mode == "auto":
        mode = "translation" if len(ids) == 1 else ("yaw" if _collinear(known) else "full")
    if mode == "translation":
        R = np.eye(3)
        t = known.mean(axis=0) - est.mean(axis=0)
    elif mode == "yaw":
        R2, t2 = kabsch(est[:, :2], known[:, :2]) if len(ids) > 1 else (np.eye(2), None)
        R = np.eye(3)
        R[:2, :2] = R2
        t = known.mean(axis=0) - R @ est.mean(axis=0)
    elif mode == "full":
        if _collinear(known):
            raise AlignmentError("anchors are collinear; full rotation is undetermined")
        R, t = kabsch(est, known)
    else:
        raise AlignmentError(f"unknown alignment mode {mode!r}")
    out = P @ R.T + t
    res = out[ids] - known
    rms = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    return out.ravel(), rms, R
