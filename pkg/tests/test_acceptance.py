"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION <k> PASS|FAIL`` line to the terminal
(capture is bypassed) and then asserts.  The long-running ones are marked
``slow``.
"""

import hashlib
import json
import math
import time

import numpy as np
import pytest

from netloc.cli import main as cli_main
from netloc.edge_select import CandidateEdge, build_mst, enumerate_spanning_trees
from netloc.eval import (
    anchor_sweep,
    matched_latency,
    registration_sweep,
    tree_rank,
    yaw_errors_deg,
)
from netloc.objective import joint_gradient, joint_loss
from netloc.orientation import estimate_offsets_yaw
from netloc.pipeline import PipelineConfig, run_pipeline
from netloc.rigidity import rigidity_report
from netloc.sim import NoiseModel, ScenarioParams, generate_scenario, noise_profile
from netloc.topology import Measurement, Topology, wrap_angle

from conftest import measured_topology


# runtime budget per criterion, seconds; criterion 12 has none
BUDGET = {1: 10, 2: 5, 3: 30, 4: 300, 5: 60, 6: 300, 7: 1, 8: 10, 9: 60, 10: 600, 11: 1800}


@pytest.fixture
def report(capsys, request):
    def emit(k: int, ok: bool, detail: str, started: float | None = None):
        took = ""
        if started is not None:
            elapsed = time.perf_counter() - started
            limit = BUDGET.get(k)
            took = f" ({elapsed:.1f} s" + (f", budget {limit} s)" if limit else ")")
            if limit and elapsed >= limit:
                ok, detail = False, f"{detail}; over the {limit} s budget"
        with capsys.disabled():
            print(f"\nCRITERION {k:2d} {'PASS' if ok else 'FAIL'}: {detail}{took}")
        assert ok, detail

    return emit


def random_tree(rng, n):
    return [(int(rng.integers(0, k)), k) for k in range(1, n)]


def both_ways(i, j, P, angle=True):
    d = P[j] - P[i]
    r = float(np.linalg.norm(d))
    az, el = math.atan2(d[1], d[0]), math.asin(d[2] / r)
    return [
        Measurement(i, j, r, az, el, angle_valid=angle),
        Measurement(j, i, r, wrap_angle(az + math.pi), -el, angle_valid=angle),
    ]


def test_criterion_01_tree_rigidity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    bad = []
    for trial in range(100):
        n = int(rng.integers(2, 31))
        edges = random_tree(rng, n)
        P = rng.uniform(0, 50, (n, 3))
        joint = Topology.build(n, [m for i, j in edges for m in both_ways(i, j, P)])
        if rigidity_report(P, joint, dim=3).dof != 3:
            bad.append(("joint", trial, n))
        if n >= 3:
            Q = rng.uniform(0, 50, (n, 2))
            ranged = Topology.build(n, [m for i, j in edges for m in both_ways(i, j, np.c_[Q, np.zeros(n)], False)])
            if not rigidity_report(Q, ranged, dim=2).dof > 3:
                bad.append(("range_only", trial, n))
    report(1, not bad, f"100 trees: joint dof == 3 and 2D range-only dof > 3; violations {bad[:3]}", t0)


def _fd(t, flat, h=1e-6):
    g = np.zeros(flat.size)
    for k in range(flat.size):
        e = np.zeros(flat.size)
        e[k] = h
        g[k] = (joint_loss(t, flat + e).total - joint_loss(t, flat - e).total) / (2 * h)
    return g


def test_criterion_02_gradient(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        P = rng.uniform(0, 20, (8, 3))
        ms = []
        for i in range(8):
            for j in range(8):
                if i != j and rng.random() < 0.5:
                    d = P[j] - P[i]
                    r = float(np.linalg.norm(d))
                    ms.append(Measurement(i, j, r + rng.normal(0, 0.3), math.atan2(d[1], d[0]) + rng.normal(0, 0.1),
                                          float(np.clip(math.asin(d[2] / r) + rng.normal(0, 0.1), -1.5, 1.5)),
                                          angle_valid=bool(rng.random() < 0.8)))
        t = Topology.build(8, ms)
        X = (P + rng.normal(0, 1.0, P.shape)).ravel()
        g = joint_gradient(t, X)
        fd = _fd(t, X)
        # relative error with a floor so components that vanish analytically compare absolutely
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-3)
        worst = max(worst, float(rel.max()))
    report(2, worst <= 1e-5, f"100 random 8-node instances, worst relative error {worst:.2e}", t0)


def test_criterion_03_noiseless_exactness(report):
    t0 = time.perf_counter()
    cfg = PipelineConfig(tilt_noise=0.0)
    worst_pos = worst_yaw = 0.0
    for n, side in ((10, 30.0), (30, 50.0), (50, 60.0)):
        s = generate_scenario(ScenarioParams(n=n, bounds=(side, side, 5.0), seed=n, noise=noise_profile("noiseless")))
        res = run_pipeline(s, cfg)
        assert res.rigidity.rigid
        worst_pos = max(worst_pos, float(res.summary.errors_3d.max()))
        est = res.orientations
        yaw = np.radians(yaw_errors_deg(est.as_array()[:, 2], s.orientations[:, 2], est.reference))
        worst_yaw = max(worst_yaw, float(yaw.max()))
    ok = worst_pos < 1e-6 and worst_yaw < 1e-6
    report(3, ok, f"n=10,30,50: max position error {worst_pos:.2e} m, max yaw error {worst_yaw:.2e} rad", t0)


@pytest.mark.slow
def test_criterion_04_latency_at_matched_accuracy(report):
    t0 = time.perf_counter()
    s = generate_scenario(ScenarioParams(n=50, bounds=(100.0, 100.0, 10.0), seed=0))
    m = matched_latency(s, PipelineConfig())
    ro = m["range_only_edges"]
    ratio = m["latency_ratio"]
    ok = (ro is None or ro >= 2 * m["range_angle_edges"]) and ratio >= 2.0
    report(4, ok, f"range+angle {m['range_angle_edges']} edges at median {m['target_median_3d']:.3f} m; "
                  f"range-only needs {ro if ro is not None else 'more than all'} edges; latency ratio {ratio:.2f}", t0)


def test_criterion_05_mst_optimality(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        edges = {(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5}
        perm = rng.permutation(n)
        edges |= {tuple(sorted((int(perm[k]), int(perm[k + 1])))) for k in range(n - 1)}
        edges = sorted(edges)
        w = {e: float(rng.uniform(0.1, 10.0)) for e in edges}
        tree = build_mst([CandidateEdge(i, j, 0.0, weight=w[(i, j)]) for i, j in edges], n)
        best = min(sum(w[e] for e in t) for t in enumerate_spanning_trees(n, edges))
        mismatches += not math.isclose(tree.total_weight, best, rel_tol=1e-12, abs_tol=1e-12)
    report(5, mismatches == 0, f"50 graphs with n <= 8, {mismatches} weight mismatches against enumeration", t0)


@pytest.mark.slow
def test_criterion_06_selected_tree_quality(report):
    t0 = time.perf_counter()
    ranks = []
    for seed in range(20):
        s = generate_scenario(ScenarioParams(n=6, bounds=(30.0, 30.0, 5.0), seed=seed))
        ranks.append(tree_rank(s))
    ok = max(ranks) <= 0.05
    report(6, ok, f"20 seeds of n=6 (1296 trees each): worst rank {max(ranks):.4f}, median {np.median(ranks):.4f}", t0)


def test_criterion_07_decomposition(report):
    t0 = time.perf_counter()
    P = np.array([[0, 0], [2, 0], [1, 1.5], [6, 0], [8, 0.5], [7, 2.0]])
    P3 = np.c_[P, np.zeros(6)]
    ms = []
    for i, j in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]:
        ms += both_ways(i, j, P3)
    ms += both_ways(2, 4, P3, angle=False)
    cands = [(i, j) for i in range(6) for j in range(i + 1, 6)]
    rep = rigidity_report(P, Topology.build(6, ms), dim=2, candidates=cands)
    merged = rigidity_report(P, Topology.build(6, ms + both_ways(1, 3, P3, angle=False)), dim=2)
    ok = len(rep.subgraphs) == 2 and (2, 4) in rep.critical_edges and len(merged.subgraphs) == 1
    report(7, ok, f"bridge only: {len(rep.subgraphs)} subgraphs, (2, 4) critical={(2, 4) in rep.critical_edges}; "
                  f"with cross range edge: {len(merged.subgraphs)} subgraph", t0)


def test_criterion_08_orientation_recovery(report):
    t0 = time.perf_counter()
    errs = []
    nm = NoiseModel(0.1, 0.1, math.radians(2.0), math.radians(2.0), nlos_enabled=False)
    for seed in range(10):
        s = generate_scenario(ScenarioParams(n=10, bounds=(20.0, 20.0, 3.0), seed=seed, noise=nm, tilt_sigma=0.0))
        est = estimate_offsets_yaw(measured_topology(s), np.zeros((10, 2)))
        errs.extend(yaw_errors_deg(est.as_array()[:, 2], s.orientations[:, 2])[1:])
    exact = 0.0
    for seed in range(10):
        s = generate_scenario(ScenarioParams(n=10, bounds=(20.0, 20.0, 3.0), seed=seed,
                                             noise=noise_profile("noiseless"), tilt_sigma=0.0))
        est = estimate_offsets_yaw(measured_topology(s), np.zeros((10, 2)))
        exact = max(exact, float(yaw_errors_deg(est.as_array()[:, 2], s.orientations[:, 2]).max()))
    ok = np.median(errs) < 3.0 and exact < 1e-9
    report(8, ok, f"2 deg noise: median yaw error {np.median(errs):.3f} deg; noiseless max {exact:.1e} deg", t0)


def test_criterion_09_registration(report):
    t0 = time.perf_counter()
    thresholds = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
    rows = registration_sweep(range(100), thresholds)
    frac = [r["registered_fraction"] for r in rows]
    fp_high = sum(r["false_positives"] for r in rows if r["threshold"] >= 0.9)
    monotone = all(a >= b for a, b in zip(frac, frac[1:]))
    report(9, fp_high == 0 and monotone,
           f"100 trials: false positives at >= 0.9: {fp_high}; registered fraction {['%.2f' % f for f in frac]}", t0)


@pytest.mark.slow
def test_criterion_10_anchor_sweep(report):
    t0 = time.perf_counter()
    counts = [1, 2, 4, 8, 16]
    per_seed = []
    for seed in range(10):
        s = generate_scenario(ScenarioParams(n=1000, bounds=(200.0, 200.0, 50.0), seed=seed))
        per_seed.append([r["median_3d"] for r in anchor_sweep(s, counts)])
    med = np.median(np.array(per_seed), axis=0)
    monotone = all(a >= b for a, b in zip(med, med[1:]))
    at4 = med[counts.index(4)]
    ok = at4 < 3.0 and monotone
    report(10, ok, f"median over 10 seeds by anchors {dict(zip(counts, np.round(med, 3).tolist()))}", t0)


CITY = dict(n=30000, bounds=(3800.0, 3800.0, 200.0), anchor_fraction=0.0005, seed=0,
            noise=noise_profile("default", max_range=100.0))
CITY_CFG = PipelineConfig(cell_size=500.0)


def _digest(res):
    return hashlib.sha256(np.ascontiguousarray(res.positions).tobytes()).hexdigest()


@pytest.mark.slow
def test_criterion_11_city_scale(report):
    t0 = time.perf_counter()
    s = generate_scenario(ScenarioParams(**CITY))
    assert len(s.anchors) == 15
    res = run_pipeline(s, CITY_CFG)
    first = time.perf_counter() - t0
    again = run_pipeline(generate_scenario(ScenarioParams(**CITY)), CITY_CFG)
    med = res.summary.median_3d
    same = _digest(res) == _digest(again)
    ok = math.isfinite(med) and 1.0 <= med <= 50.0 and same and first < 1800
    report(11, ok, f"30000 nodes, 15 anchors, 500 m cells: median {med:.2f} m, p90 {res.summary.p90_3d:.2f} m, "
                   f"single run {first:.0f} s (budget 1800 s), repeat identical={same}")


def _cli_artifacts(tmp, tag):
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps({
        "scenario": {"n": 20, "bounds": [40, 40, 5]},
        "experiment": {"seeds": [0, 1], "edge_counts": [19, 38], "anchor_counts": [1, 4], "trials": 5,
                       "max_edges": 60, "step": 10},
    }))
    out = tmp / tag
    out.mkdir()
    args = ["--config", str(cfg), "--seed", "3", "--threads", "1", "--log-level", "WARNING"]
    assert cli_main(["generate", *args, "--out", str(out / "scenario.json")]) == 0
    assert cli_main(["solve", str(out / "scenario.json"), *args, "--anchors", "3", "--out", str(out / "results.json")]) == 0
    for name in ("edges_sweep", "anchor_sweep", "latency", "registration"):
        assert cli_main(["experiment", name, *args, "--out", str(out / f"{name}.csv")]) == 0
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_criterion_12_determinism(report, tmp_path):
    t0 = time.perf_counter()
    a = _cli_artifacts(tmp_path, "first")
    b = _cli_artifacts(tmp_path, "second")
    differ = [k for k in a if a[k] != b.get(k)]
    # library-level artifacts of the criteria above
    s = generate_scenario(ScenarioParams(n=200, bounds=(60.0, 60.0, 10.0), seed=12))
    runs = [run_pipeline(s, PipelineConfig(anchor_count=4)) for _ in range(2)]
    lib_same = _digest(runs[0]) == _digest(runs[1]) and runs[0].events == runs[1].events
    cells = [run_pipeline(s, PipelineConfig(anchor_count=4, cell_size=20.0)) for _ in range(2)]
    cell_same = _digest(cells[0]) == _digest(cells[1])
    rank_same = tree_rank(generate_scenario(ScenarioParams(n=6, bounds=(30.0, 30.0, 5.0), seed=1))) == tree_rank(
        generate_scenario(ScenarioParams(n=6, bounds=(30.0, 30.0, 5.0), seed=1)))
    ok = not differ and lib_same and cell_same and rank_same
    report(12, ok, f"{len(a)} CLI artifacts byte-identical across runs (differing: {differ}); "
                   f"pipeline={lib_same}, cells={cell_same}, tree rank={rank_same}", t0)
