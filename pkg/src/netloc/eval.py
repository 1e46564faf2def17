"""Error metrics and the experiment reductions built on the pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .anchors import AnchorSet, align_to_global, kabsch, match_tracks
from .topology import wrap_angle


@dataclass(frozen=True)
class ErrorSummary:
    errors_3d: np.ndarray
    errors_2d: np.ndarray
    median_3d: float
    p90_3d: float
    median_2d: float
    p90_2d: float
    orientation_median_deg: float | None = None
    mode: str = "relative"
    alignment_residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "median_3d": self.median_3d,
            "p90_3d": self.p90_3d,
            "median_2d": self.median_2d,
            "p90_2d": self.p90_2d,
            "orientation_median_deg": self.orientation_median_deg,
            "alignment_residual": self.alignment_residual,
        }


def summarize(errors_3d, errors_2d, orientation_deg=None, mode="relative", residual=0.0) -> ErrorSummary:
    e3 = np.asarray(errors_3d, dtype=float)
    e2 = np.asarray(errors_2d, dtype=float)
    om = None if orientation_deg is None or len(orientation_deg) == 0 else float(np.median(orientation_deg))
    return ErrorSummary(
        e3, e2,
        float(np.median(e3)), float(np.percentile(e3, 90)),
        float(np.median(e2)), float(np.percentile(e2, 90)),
        om, mode, float(residual),
    )


def localization_errors(
    X_est,
    ground_truth,
    anchors=None,
    allow_reflection: bool = False,
    orientation_deg=None,
    exclude_anchors: bool = False,
    align_mode: str = "auto",
) -> ErrorSummary:
    """Per-node 3D and xy errors after alignment.

    With anchors the estimate is moved onto them (see ``align_to_global``);
    without, it is best-fit aligned to the truth (relative mode).
    """
    P = np.asarray(X_est, dtype=float).reshape(-1, 3)
    T = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if P.shape != T.shape:
        raise ValueError(f"estimate has shape {P.shape}, ground truth {T.shape}")
    amap = anchors.positions() if isinstance(anchors, AnchorSet) else dict(anchors or {})
    if amap:
        flat, residual, _ = align_to_global(P, amap, align_mode)
        A = flat.reshape(-1, 3)
        mode = "anchored"
    else:
        R, t = kabsch(P, T, allow_reflection=allow_reflection)
        A = P @ R.T + t
        residual = 0.0
        mode = "relative"
    d = A - T
    keep = np.ones(len(P), dtype=bool)
    if exclude_anchors and amap:
        keep[sorted(amap)] = False
        if not keep.any():
            keep[:] = True
    e3 = np.linalg.norm(d, axis=1)[keep]
    e2 = np.hypot(d[:, 0], d[:, 1])[keep]
    return summarize(e3, e2, orientation_deg, mode, residual)


def yaw_errors_deg(est_yaw, true_yaw, reference: int = 0) -> np.ndarray:
    """Yaw errors relative to the reference node's gauge, degrees."""
    est = np.asarray(est_yaw, dtype=float)
    tru = np.asarray(true_yaw, dtype=float)
    rel = wrap_angle(tru - tru[reference])
    return np.degrees(np.abs(wrap_angle(est - rel)))


# -- experiments ---------------------------------------------------------------


def edges_vs_accuracy(scenario, edge_counts: Sequence[int], mode: str, cfg=None) -> list[dict]:
    """Median error per edge budget (MST first, then cheapest-weight augmentation)."""
    from .pipeline import PipelineConfig, run_pipeline

    cfg = cfg or PipelineConfig()
    n = scenario.n
    rows = []
    for count in edge_counts:
        if count > n * (n - 1) // 2:
            raise ValueError(f"edge count {count} exceeds n(n-1)/2 = {n * (n - 1) // 2}")
        c = replace(cfg, mode=mode, total_edges=int(count), edges_per_node=0, augment_to_rigid=False)
        res = run_pipeline(scenario, c)
        rows.append({
            "mode": mode,
            "edges": len(res.edges),
            "median_3d": res.summary.median_3d,
            "p90_3d": res.summary.p90_3d,
            "rigid": bool(res.rigidity.rigid) if res.rigidity is not None else None,
            "dof": res.rigidity.dof if res.rigidity is not None else None,
            "latency_s": res.latency,
        })
    return rows


def anchor_sweep(scenario, anchor_counts: Sequence[int], cfg=None) -> list[dict]:
    """Median error per anchor count on one scenario; anchors are nested prefixes."""
    from .pipeline import PipelineConfig, run_pipeline

    cfg = cfg or PipelineConfig()
    rows = []
    for k in anchor_counts:
        if k < 0:
            raise ValueError("anchor counts must be >= 0")
        res = run_pipeline(scenario, replace(cfg, anchor_count=int(k)))
        rows.append({
            "anchors": int(k),
            "mode": res.summary.mode,
            "median_3d": res.summary.median_3d,
            "p90_3d": res.summary.p90_3d,
            "median_2d": res.summary.median_2d,
        })
    return rows


def matched_latency(scenario, cfg=None, max_edges: int | None = None, step: int | None = None) -> dict:
    """Edges range-only ranging needs to match range+angle at ``n - 1`` edges.

    Returns the target error, the matching range-only edge count (None when
    the budget is exhausted first) and the latency ratio.
    """
    from .pipeline import PipelineConfig
    from .sim import simulate_epoch_latency

    cfg = cfg or PipelineConfig()
    n = scenario.n
    base = edges_vs_accuracy(scenario, [n - 1], "range_angle", cfg)[0]
    target = base["median_3d"]
    cap = max_edges or n * (n - 1) // 2
    step = step or max(1, n // 5)
    sweep = []
    matched = None
    count = n - 1
    while count <= cap:
        row = edges_vs_accuracy(scenario, [count], "range_only", cfg)[0]
        sweep.append(row)
        if row["median_3d"] <= target:
            matched = row["edges"]
            break
        if count == cap:
            break
        count = min(cap, count + step)
    lm = cfg.latency
    ra_latency = simulate_epoch_latency(base["edges"], lm)
    ro_latency = simulate_epoch_latency(matched, lm) if matched is not None else math.inf
    return {
        "target_median_3d": target,
        "range_angle_edges": base["edges"],
        "range_only_edges": matched,
        "range_angle_latency_s": ra_latency,
        "range_only_latency_s": ro_latency,
        "latency_ratio": ro_latency / ra_latency if ra_latency > 0 else math.inf,
        "sweep": sweep,
    }


def registration_trial(seed: int, n_nodes: int = 10, n_tracks: int = 4, window: float = 45.0,
                       thresholds: Sequence[float] = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95),
                       node_jitter: float = 0.2, camera_jitter: float = 0.1,
                       node_period: float = 0.5, camera_period: float = 0.1,
                       bounds=(30.0, 30.0, 0.0001)) -> list[dict]:
    """One Monte-Carlo registration scenario with known track-to-node truth."""
    from .sim import ScenarioParams, generate_scenario, simulate_trajectories

    s = generate_scenario(ScenarioParams(n=n_nodes, bounds=tuple(bounds), seed=seed, mobile=True))
    _, nodes = simulate_trajectories(s, window, node_period, jitter=node_jitter, seed_tag=1)
    _, cams = simulate_trajectories(s, window, camera_period, jitter=camera_jitter, seed_tag=2)
    visible = sorted(int(v) for v in s.anchor_order[:n_tracks])
    # track ids are offset so they cannot be mistaken for node ids
    tracks = {1000 + v: cams[v] for v in visible}
    rows = []
    for th in thresholds:
        got = match_tracks(nodes, tracks, th, window)
        fp = sum(int(tk - 1000 != nd) for tk, (nd, _) in got.items())
        rows.append({
            "seed": seed,
            "threshold": th,
            "registered": len(got),
            "visible": len(visible),
            "registered_fraction": len(got) / len(visible) if visible else 0.0,
            "false_positives": fp,
        })
    return rows


def registration_sweep(seeds: Sequence[int], thresholds: Sequence[float], **kw) -> list[dict]:
    per = [registration_trial(s, thresholds=thresholds, **kw) for s in seeds]
    rows = []
    for k, th in enumerate(thresholds):
        reg = sum(p[k]["registered"] for p in per)
        vis = sum(p[k]["visible"] for p in per)
        rows.append({
            "threshold": th,
            "registered_fraction": reg / vis if vis else 0.0,
            "false_positives": sum(p[k]["false_positives"] for p in per),
            "trials": len(per),
        })
    return rows


def tree_errors(scenario, trees, cfg=None) -> list[float]:
    """Relative-mode median error of each spanning tree after orientation and solve.

    Measurements are drawn once, so every tree sees the same noisy readings.
    """
    from .edge_select import DisconnectedGraphError
    from .objective import displacement_init, solve_positions
    from .orientation import estimate_offsets_yaw, to_global_frame
    from .pipeline import PipelineConfig, _candidates, _measurements_for, _roll_pitch
    from .topology import Topology

    cfg = cfg or PipelineConfig()
    _, by_key = _candidates(scenario, cfg, [])
    rp = _roll_pitch(scenario, cfg)
    out = []
    for tree in trees:
        pairs = sorted({(min(i, j), max(i, j)) for i, j in tree})
        if any(p not in by_key for p in pairs):
            raise DisconnectedGraphError(f"tree uses unmeasured pairs {pairs}")
        topo = Topology.build(scenario.n, _measurements_for(pairs, by_key, "range_angle"))
        g = to_global_frame(topo, estimate_offsets_yaw(topo, rp))
        res = solve_positions(g, displacement_init(g), cfg.solver)
        out.append(localization_errors(res.positions, scenario.positions).median_3d)
    return out


def tree_rank(scenario, cfg=None) -> float:
    """Fraction of all spanning trees of the candidate graph that beat the selected tree."""
    from .edge_select import build_mst, enumerate_spanning_trees
    from .pipeline import PipelineConfig, _candidates

    cfg = cfg or PipelineConfig()
    cands, _ = _candidates(scenario, cfg, [])
    chosen = tuple(build_mst(cands, scenario.n).pairs)
    trees = enumerate_spanning_trees(scenario.n, [e.pair for e in cands])
    errs = np.array(tree_errors(scenario, trees, cfg))
    mine = errs[trees.index(chosen)]
    return float(np.mean(errs < mine - 1e-9))
