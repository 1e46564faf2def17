"""End-to-end epoch: select edges, measure, orient, solve, align, score."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _rng
from .anchors import DEFAULT_BOOST, AnchorSet, align_to_global, apply_anchor_weights, boost_candidates
from .edge_select import CandidateEdge, make_candidate, select_edges
from .eval import ErrorSummary, localization_errors
from .frames import orientation_from_matrix, rotation_angle, rotation_matrices
from .objective import (
    SolverConfig,
    displacement_init,
    mds_init,
    random_init,
    solve_positions,
)
from .orientation import (
    OffsetEstimate,
    estimate_offsets_full,
    estimate_offsets_yaw,
    rotate_yaw,
    to_global_frame,
    yaw_corrections,
)
from .cells import partition, place, solve_cell, stitch
from .rigidity import RigidityReport, contracted_report, critical_edges, rigidity_report
from .sim import LatencyModel, Scenario, candidate_pairs, simulate_epoch_latency, synthesize_measurements
from .topology import Measurement, Orientation, Topology

log = logging.getLogger(__name__)

_TAG_TILT = 40
_TAG_GENERIC = 41
_TAG_RESTART = 42


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "range_angle"  # or "range_only"
    edges_per_node: int = 6
    total_edges: int | None = None
    augment_to_rigid: bool = True
    max_rigidity_rounds: int = 50
    dense_rigidity_limit: int = 300
    orientation: str = "yaw"  # "yaw", "full" or "truth"
    tilt_noise: float = math.radians(1.0)  # roll/pitch sensor noise on the yaw path
    anchor_count: int | None = None  # None: the scenario's anchor_fraction
    anchor_boost: float = DEFAULT_BOOST
    restarts: int = 5
    # alternate position solves with closed-form yaw corrections
    yaw_refine_rounds: int = 3
    # square xy cells (meters) solved separately before a global polish; None solves globally
    cell_size: float | None = None
    cell_halo: int = 2  # graph hops shared with neighbouring cells
    solver: SolverConfig = field(default_factory=SolverConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)
    epoch: int = 0

    def __post_init__(self):
        if self.mode not in ("range_angle", "range_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.orientation not in ("yaw", "full", "truth"):
            raise ValueError(f"unknown orientation path {self.orientation!r}")
        if self.edges_per_node < 0:
            raise ValueError("edges_per_node must be >= 0")
        if self.anchor_boost < 1:
            raise ValueError("anchor_boost must be >= 1")
        if self.yaw_refine_rounds < 0:
            raise ValueError("yaw_refine_rounds must be >= 0")
        if self.cell_size is not None:
            if not self.cell_size > 0:
                raise ValueError("cell_size must be > 0")
            if self.mode != "range_angle" or self.orientation != "yaw":
                raise ValueError("cell partitioning needs mode range_angle and the yaw orientation path")
        if self.cell_halo < 1:
            raise ValueError("cell_halo must be >= 1")


@dataclass
class PipelineResult:
    positions: np.ndarray  # (n, 3) in the anchor frame, or the solver frame without anchors
    orientations: OffsetEstimate | None
    topology: Topology
    edges: list[tuple[int, int]]
    rigidity: RigidityReport | None
    summary: ErrorSummary
    latency: float
    loss: float
    iterations: int
    converged: bool
    events: list[str] = field(default_factory=list)


def _event(events: list[str], name: str, **kv) -> None:
    line = " ".join([f"event={name}"] + [f"{k}={v}" for k, v in kv.items()])
    events.append(line)
    log.info(line)


def _candidates(s: Scenario, cfg: PipelineConfig, anchor_ids: Sequence[int]):
    pairs = candidate_pairs(s)
    measured = synthesize_measurements(s, pairs, epoch=cfg.epoch)
    by_key = {m.key: m for m in measured}
    cands = []
    for i, j in pairs:
        fwd, bwd = by_key.get((int(i), int(j))), by_key.get((int(j), int(i)))
        if fwd is None or bwd is None:
            continue
        angle = cfg.mode == "range_angle" and fwd.angle_valid and bwd.angle_valid
        cands.append(make_candidate(int(i), int(j), fwd.range, angle, max(fwd.sigma_los, bwd.sigma_los)))
    if anchor_ids and cfg.anchor_boost > 1:
        cands = boost_candidates(cands, anchor_ids, cfg.anchor_boost)
    return cands, by_key


def _measurements_for(edges, by_key, mode: str) -> list[Measurement]:
    out = []
    for i, j in edges:
        for key in ((i, j), (j, i)):
            m = by_key[key]
            if mode == "range_only":
                m = replace(m, azimuth=0.0, elevation=0.0, angle_valid=False)
            out.append(m)
    return out


def _generic_positions(s: Scenario) -> np.ndarray:
    ids = np.arange(s.n)[:, None]
    u = _rng.uniform(s.params.seed, _TAG_GENERIC, ids, 0, np.arange(3)[None, :])
    return u * np.asarray(s.params.bounds, dtype=float)


def _rigidity(X, topo: Topology, cands: Sequence[CandidateEdge], cfg: PipelineConfig) -> RigidityReport:
    pairs = [e.pair for e in cands]
    if topo.n <= cfg.dense_rigidity_limit:
        return rigidity_report(X, topo, 3, None, pairs)
    return contracted_report(X, topo, None, pairs)


def _quick_positions(topo: Topology, s: Scenario, cfg: PipelineConfig) -> np.ndarray:
    """Cheap provisional positions used to rank critical edges by length."""
    if cfg.mode == "range_angle" and np.any(topo.arrays.angle_valid):
        return displacement_init(topo).reshape(-1, 3)
    return mds_init(topo).reshape(-1, 3)


def _roll_pitch(s: Scenario, cfg: PipelineConfig) -> np.ndarray:
    ids = np.arange(s.n)[:, None]
    noise = _rng.normal(s.params.seed, _TAG_TILT, ids, cfg.epoch, np.arange(2)[None, :])
    return s.orientations[:, :2] + cfg.tilt_noise * noise


def _orientation_errors(s: Scenario, W: np.ndarray, ref: int) -> np.ndarray:
    """Angle between estimated and true orientation, both taken relative to ``ref``."""
    Rt = rotation_matrices(s.orientations)
    rel_true = np.einsum("ji,njk->nik", Rt[ref], Rt)  # R_ref^T R_i
    rel_est = np.einsum("ji,njk->nik", W[ref], W)
    return np.degrees([rotation_angle(rel_est[k].T @ rel_true[k]) for k in range(s.n)])


def _rz(delta: np.ndarray) -> np.ndarray:
    c, si = np.cos(delta), np.sin(delta)
    out = np.zeros((len(delta), 3, 3))
    out[:, 0, 0], out[:, 0, 1], out[:, 1, 0], out[:, 1, 1], out[:, 2, 2] = c, -si, si, c, 1.0
    return out


def _rotate_angles(topo: Topology, R: np.ndarray) -> Topology:
    if np.allclose(R, np.eye(3), atol=0, rtol=0):
        return topo
    o = orientation_from_matrix(R).as_array()
    return to_global_frame(topo, np.tile(o, (topo.n, 1)))


def _cell_solve(topo: Topology, rp: np.ndarray, X0: np.ndarray, est: OffsetEstimate, pinned,
                cfg: PipelineConfig, events: list[str]) -> tuple[np.ndarray, OffsetEstimate]:
    """Per-cell local solves stitched into one frame; returns positions and yaw offsets."""
    plan = partition(X0, cfg.cell_size, topo, cfg.cell_halo)
    sols = [solve_cell(topo, rp, plan.members[c], plan.core[c], cfg.solver, cfg.yaw_refine_rounds)
            for c in range(len(plan.keys))]
    yaw_c, t_c, home, gap = stitch(sols, plan.owner, pinned)
    X, yaw = place(sols, home, yaw_c, t_c, X0, est.as_array()[:, 2])
    _event(events, "cells", count=len(sols), mean_members=f"{np.mean([len(m) for m in plan.members]):.1f}",
           unplaced=int(np.sum(home < 0)), iterations=sum(c.iterations for c in sols), stitch_rms=f"{gap:.6g}")
    ors = tuple(Orientation(float(rp[k, 0]), float(rp[k, 1]), float(yaw[k])) for k in range(topo.n))
    return X, OffsetEstimate(ors, est.reference, est.components, est.objective)


def run_pipeline(s: Scenario, cfg: PipelineConfig = PipelineConfig(), anchors: AnchorSet | None = None,
                 edges: Sequence[tuple[int, int]] | None = None) -> PipelineResult:
    """One localization epoch on a simulated scenario.

    ``edges`` replaces edge selection with a fixed list of measured pairs;
    each must be a candidate (in range, measured both ways).
    """
    events: list[str] = []
    n = s.n
    if anchors is None:
        count = s.params.anchor_count if cfg.anchor_count is None else cfg.anchor_count
        anchors = AnchorSet(s.anchor_positions(count))
    amap = anchors.positions()
    cands, by_key = _candidates(s, cfg, list(amap))
    if edges is None:
        chosen = select_edges(cands, n, total=cfg.total_edges, per_node=cfg.edges_per_node)
        edges = [e.pair for e in chosen]
    else:
        edges = sorted({(min(i, j), max(i, j)) for i, j in edges})
        missing = sorted(set(edges) - {e.pair for e in cands})
        if missing:
            raise PipelineError(f"pairs {missing[:5]} are not measurable candidates")
    _event(events, "edges_selected", count=len(edges), candidates=len(cands), mode=cfg.mode)
    topo = Topology.build(n, _measurements_for(edges, by_key, cfg.mode))

    # rigidity check at generic positions; augment with critical edges when asked
    report = None
    if n >= 2:
        Xg = _generic_positions(s)
        report = _rigidity(Xg, topo, cands, cfg)
        rounds = 0
        while not report.rigid and cfg.augment_to_rigid and rounds < cfg.max_rigidity_rounds:
            _event(events, "rigidity", rigid=False, dof=report.dof, subgraphs=len(report.subgraphs))
            _event(events, "decomposition", subgraphs=";".join(",".join(map(str, g)) for g in report.subgraphs))
            P = _quick_positions(topo, s, cfg)
            crit = critical_edges(report.subgraphs, [e.pair for e in cands if e.pair not in set(edges)], P)
            if not crit:
                _event(events, "rigidity_augmentation_exhausted", dof=report.dof)
                break
            edges = sorted(edges + [crit[0]])
            _event(events, "critical_edge_added", pair=f"{crit[0][0]}-{crit[0][1]}")
            topo = Topology.build(n, _measurements_for(edges, by_key, cfg.mode))
            report = _rigidity(Xg, topo, cands, cfg)
            rounds += 1
        _event(events, "rigidity", rigid=report.rigid, dof=report.dof, subgraphs=len(report.subgraphs))

    # orientation offsets, then angles into one shared frame
    est = None
    W = None  # (n, 3, 3) estimated body-to-world rotations
    g = topo
    if cfg.mode == "range_angle":
        if cfg.orientation == "truth":
            g = to_global_frame(topo, s.orientations)
            _event(events, "orientation", path="truth")
        else:
            if cfg.orientation == "yaw":
                rp = _roll_pitch(s, cfg)
                est = estimate_offsets_yaw(topo, rp, reference=0, allow_disconnected=True)
            else:
                est = estimate_offsets_full(topo, reference=0, allow_disconnected=True)
            W = rotation_matrices(est.as_array())
            g = to_global_frame(topo, est)
            _event(events, "orientation", path=cfg.orientation, components=len(est.components),
                   objective=f"{est.objective:.6g}",
                   median_error_deg=f"{float(np.median(_orientation_errors(s, W, est.reference))):.4f}")

    # initial positions, brought into the anchor frame
    pinned = amap if amap else {}
    # a yaw-path frame is already level, so only yaw and translation are unknown
    level = cfg.mode == "range_angle" and cfg.orientation in ("yaw", "truth")
    align_mode = ("translation" if len(pinned) == 1 else "yaw") if level else "auto"
    if cfg.mode == "range_angle":
        X0 = displacement_init(g).reshape(-1, 3)
        if cfg.cell_size is not None:
            X0, est = _cell_solve(topo, rp, X0, est, pinned, cfg, events)
            W = rotation_matrices(est.as_array())
            g = to_global_frame(topo, est)
            _event(events, "cell_orientation",
                   median_error_deg=f"{float(np.median(_orientation_errors(s, W, est.reference))):.4f}")
        if pinned:
            flat, resid, Rq = align_to_global(X0, pinned, align_mode)
            X0 = flat.reshape(-1, 3)
            g = _rotate_angles(g, Rq)
            if W is not None:
                W = Rq @ W
            _event(events, "prealign", anchors=len(pinned), residual=f"{resid:.6g}")
        inits = [X0.ravel()]
    else:
        M = mds_init(g).reshape(-1, 3)
        if len(pinned) >= 3:
            pick = None
            for mirror in (1.0, -1.0):
                cand = M * np.array([1.0, 1.0, mirror])
                flat, resid, _ = align_to_global(cand, pinned)
                if pick is None or resid < pick[1]:
                    pick = (flat, resid)
            M = pick[0].reshape(-1, 3)
        inits = [M.ravel()]
        # a separate stream so restarts never replay the placement draws
        rng = np.random.default_rng([cfg.solver.seed, s.params.seed, _TAG_RESTART])
        inits += [random_init(n, s.params.bounds, rng) for _ in range(cfg.restarts)]

    solve_topo = apply_anchor_weights(g, pinned, cfg.anchor_boost) if pinned else g
    best = None
    for x0 in inits:
        res = solve_positions(solve_topo, x0, cfg.solver)
        if best is None or res.loss.total < best.loss.total:
            best = res
    iterations = best.iterations
    _event(events, "solve", loss=f"{best.loss.total:.6g}", iterations=best.iterations, converged=best.converged)

    # estimated orientations are refined against the solved positions; each
    # round lowers the same joint loss, so it stops once corrections vanish
    if W is not None:
        for rnd in range(cfg.yaw_refine_rounds):
            delta = yaw_corrections(solve_topo, best.positions)
            if not np.any(np.abs(delta) > 1e-12):
                break
            solve_topo = rotate_yaw(solve_topo, delta)
            W = _rz(delta) @ W
            best = solve_positions(solve_topo, best.positions, cfg.solver)
            iterations += best.iterations
            _event(events, "yaw_refine", round=rnd + 1, max_correction_deg=f"{np.degrees(np.max(np.abs(delta))):.4g}",
                   loss=f"{best.loss.total:.6g}", iterations=best.iterations)
        est = OffsetEstimate(tuple(orientation_from_matrix(R) for R in W), est.reference, est.components,
                             est.objective)
    X = best.positions.reshape(-1, 3)
    if not best.converged:
        _event(events, "solver_not_converged", iterations=best.iterations)

    orient_deg = None if est is None else _orientation_errors(s, W, est.reference)
    summary = localization_errors(
        X, s.positions, pinned or None,
        allow_reflection=cfg.mode == "range_only",
        orientation_deg=orient_deg,
        align_mode=align_mode,
    )
    if pinned:
        X = align_to_global(X, pinned, align_mode)[0].reshape(-1, 3)
    _event(events, "summary", mode=summary.mode, median_3d=f"{summary.median_3d:.6g}", p90_3d=f"{summary.p90_3d:.6g}")
    latency = simulate_epoch_latency(len(edges), cfg.latency)
    return PipelineResult(X, est, solve_topo, edges, report, summary, latency,
                          best.loss.total, iterations, best.converged, events)
