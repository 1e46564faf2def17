"""Command-line front end: ``netloc generate | solve | experiment``.

Configuration comes from an optional JSON file with the sections
``scenario``, ``noise``, ``solver``, ``pipeline``, ``latency`` and
``experiment``; command-line flags override file values.  Logs go to
stderr as ``key=value`` lines.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .edge_select import DisconnectedGraphError
from .eval import anchor_sweep, edges_vs_accuracy, matched_latency, registration_sweep
from .objective import SolverConfig, SolverError
from .orientation import OrientationError
from .pipeline import PipelineConfig, run_pipeline
from .sim import (
    NOISE_PROFILES,
    LatencyModel,
    NoiseModel,
    ScenarioError,
    ScenarioParams,
    generate_scenario,
    load_scenario,
    noise_profile,
    scenario_to_dict,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
OUT_DIR_ENV = "NETLOC_OUT_DIR"
GENERATE_DEFAULT_N = 10  # desk-scale default for ad-hoc scenario files
EXPERIMENTS = ("edges_sweep", "anchor_sweep", "latency", "registration")

log = logging.getLogger("netloc")


class ConfigError(ValueError):
    pass


_SCENARIO_KEYS = {f.name for f in fields(ScenarioParams)} - {"noise"}
_NOISE_KEYS = {f.name for f in fields(NoiseModel)} | {"profile"}
_SOLVER_KEYS = {f.name for f in fields(SolverConfig)}
_PIPELINE_KEYS = {f.name for f in fields(PipelineConfig)} - {"solver", "latency"}
_LATENCY_KEYS = {f.name for f in fields(LatencyModel)}
_EXPERIMENT_KEYS = {"seeds", "edge_counts", "anchor_counts", "thresholds", "trials", "window", "max_edges", "step"}
_SECTIONS = {
    "scenario": _SCENARIO_KEYS,
    "noise": _NOISE_KEYS,
    "solver": _SOLVER_KEYS,
    "pipeline": _PIPELINE_KEYS,
    "latency": _LATENCY_KEYS,
    "experiment": _EXPERIMENT_KEYS,
}


def _check_keys(raw: dict) -> None:
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}; valid: {sorted(_SECTIONS)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for k in body:
            if k not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{k}")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def resolve_config(args: argparse.Namespace) -> dict:
    """File values, then flag overrides, validated into a plain nested dict."""
    raw = _read_config(getattr(args, "config", None))
    _check_keys(raw)
    cfg = {s: dict(raw.get(s, {})) for s in _SECTIONS}
    if getattr(args, "seed", None) is not None:
        cfg["scenario"]["seed"] = args.seed
        cfg["solver"]["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        cfg["scenario"]["n"] = args.n
    if getattr(args, "mode", None):
        cfg["pipeline"]["mode"] = args.mode
    if getattr(args, "noise_profile", None):
        cfg["noise"]["profile"] = args.noise_profile
    anchors = getattr(args, "anchors", None)
    if anchors is not None:
        try:
            value = float(anchors)
        except ValueError as exc:
            raise ConfigError(f"--anchors must be a count or a fraction, got {anchors!r}") from exc
        if "." in anchors or "e" in anchors.lower():
            cfg["scenario"]["anchor_fraction"] = value
            cfg["pipeline"].pop("anchor_count", None)
        else:
            if value < 0:
                raise ConfigError("anchors must be >= 0")
            cfg["pipeline"]["anchor_count"] = int(value)
    cfg["scenario"].setdefault("seed", 0)
    build(cfg)  # validate before any computation
    return cfg


def _noise(section: dict) -> NoiseModel:
    body = dict(section)
    profile = body.pop("profile", "default")
    if profile not in NOISE_PROFILES:
        raise ConfigError(f"noise.profile: unknown profile {profile!r}; choose from {sorted(NOISE_PROFILES)}")
    return replace(noise_profile(profile), **body) if body else noise_profile(profile)


def build(cfg: dict):
    """Typed objects from a resolved config; raises ``ConfigError`` naming the bad field."""
    def make(section, fn):
        try:
            return fn()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc

    noise = make("noise", lambda: _noise(cfg["noise"]))
    sc = dict(cfg["scenario"])
    for key in ("bounds", "speed_range"):
        if key in sc:
            sc[key] = tuple(sc[key])
    params = make("scenario", lambda: ScenarioParams(noise=noise, **sc))
    solver = make("solver", lambda: SolverConfig(**cfg["solver"]))
    latency = make("latency", lambda: LatencyModel(**cfg["latency"]))
    pipe = make("pipeline", lambda: PipelineConfig(solver=solver, latency=latency, **cfg["pipeline"]))
    if pipe.anchor_count is not None and pipe.anchor_count > params.n:
        raise ConfigError(f"pipeline.anchor_count: {pipe.anchor_count} exceeds n={params.n}")
    return params, pipe


# -- output helpers ------------------------------------------------------------


def _out_path(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / default_name


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def _json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serialisable: {type(v).__name__}")


def _table(rows: list[dict], cfg: dict, seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# config={json.dumps(cfg, sort_keys=True)}\n")
    buf.write(f"# seed={seed}\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def _kv(event: str, **kv) -> None:
    log.info(" ".join([f"event={event}"] + [f"{k}={v}" for k, v in kv.items()]))


# -- subcommands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n is None and "n" not in _read_config(args.config).get("scenario", {}):
        args.n = GENERATE_DEFAULT_N
    cfg = resolve_config(args)
    params, _ = build(cfg)
    s = generate_scenario(params)
    doc = {"config": cfg, "seed": params.seed}
    doc.update(scenario_to_dict(s))
    path = _out_path(args, "scenario.json")
    _write(path, _json(doc))
    _kv("generated", path=path, n=s.n, anchors=len(s.anchors), seed=params.seed)
    print(f"wrote {path}: n={s.n} anchors={len(s.anchors)} seed={params.seed}")
    return EXIT_OK


def _load_scenario_for(args, params: ScenarioParams):
    try:
        s = load_scenario(args.scenario)
    except OSError as exc:
        raise IOError(f"cannot read scenario {args.scenario}: {exc}") from exc
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed scenario {args.scenario}: {exc}") from exc
    # solve-time noise/anchor/seed settings override the generation-time ones
    p = replace(s.params, noise=params.noise, anchor_fraction=params.anchor_fraction
                if args.anchors is not None and "." in str(args.anchors) else s.params.anchor_fraction)
    if args.seed is not None:
        p = replace(p, seed=params.seed)
    return replace(s, params=p)


def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    params, pipe = build(cfg)
    s = _load_scenario_for(args, params)
    path = _out_path(args, "results.json")
    doc = {"config": cfg, "seed": s.params.seed, "status": "ok"}
    try:
        res = run_pipeline(s, pipe)
    except (SolverError, OrientationError, DisconnectedGraphError, np.linalg.LinAlgError) as exc:
        doc["status"] = "solver_failure"
        doc["error"] = str(exc)
        _write(path, _json(doc))
        _kv("solver_failure", error=repr(str(exc)))
        return EXIT_SOLVER
    doc["status"] = "ok" if res.converged else "not_converged"
    doc["summary"] = res.summary.to_dict()
    doc["solver"] = {"loss": res.loss, "iterations": res.iterations, "converged": res.converged}
    doc["edges"] = {"count": len(res.edges), "latency_s": res.latency, "pairs": [list(e) for e in res.edges]}
    doc["rigidity"] = res.rigidity.to_dict() if res.rigidity is not None else None
    ors = res.orientations.as_array() if res.orientations is not None else None
    doc["poses"] = [
        {"id": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
         **({"roll": float(ors[i, 0]), "pitch": float(ors[i, 1]), "yaw": float(ors[i, 2])} if ors is not None else {}),
         "error_3d": float(e3), "error_2d": float(e2)}
        for i, (p, e3, e2) in enumerate(zip(res.positions, res.summary.errors_3d, res.summary.errors_2d))
    ]
    doc["events"] = res.events
    _write(path, _json(doc))
    if not res.converged:
        _kv("solver_not_converged", iterations=res.iterations, loss=res.loss)
    _kv("solved", path=path, median_3d=res.summary.median_3d, p90_3d=res.summary.p90_3d)
    print(f"wrote {path}: median_3d={res.summary.median_3d:.4g} m p90_3d={res.summary.p90_3d:.4g} m")
    return EXIT_OK


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def cmd_experiment(args) -> int:
    if args.name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {args.name!r}; valid: {', '.join(EXPERIMENTS)}")
    cfg = resolve_config(args)
    params, pipe = build(cfg)
    ex = cfg["experiment"]
    seeds = [int(v) for v in ex.get("seeds", [params.seed])]
    threads = max(1, args.threads)

    def scenario(seed):
        return generate_scenario(replace(params, seed=seed))

    rows: list[dict] = []
    if args.name == "edges_sweep":
        n = params.n
        counts = [int(c) for c in ex.get("edge_counts", [n - 1, 2 * (n - 1), 3 * (n - 1), 4 * (n - 1), 6 * (n - 1)])]
        modes = [args.mode] if args.mode else ["range_angle", "range_only"]

        def one(seed):
            s = scenario(seed)
            out = []
            for mode in modes:
                for r in edges_vs_accuracy(s, counts, mode, pipe):
                    out.append({"seed": seed, **r})
            return out

        rows = [r for chunk in _pmap(one, seeds, threads) for r in chunk]
    elif args.name == "anchor_sweep":
        counts = [int(c) for c in ex.get("anchor_counts", [1, 2, 4, 8, 16])]

        def one(seed):
            return [{"seed": seed, **r} for r in anchor_sweep(scenario(seed), counts, pipe)]

        rows = [r for chunk in _pmap(one, seeds, threads) for r in chunk]
    elif args.name == "latency":
        def one(seed):
            m = matched_latency(scenario(seed), pipe, ex.get("max_edges"), ex.get("step"))
            m.pop("sweep")
            return {"seed": seed, **m}

        rows = _pmap(one, seeds, threads)
    else:
        thresholds = [float(t) for t in ex.get("thresholds", [0.5, 0.6, 0.7, 0.8, 0.9, 0.95])]
        trials = int(ex.get("trials", 100))
        window = float(ex.get("window", 45.0))
        base = params.seed
        rows = registration_sweep([base + k for k in range(trials)], thresholds, window=window)
    path = _out_path(args, f"{args.name}.csv")
    _write(path, _table(rows, cfg, params.seed))
    _kv("experiment", name=args.name, rows=len(rows), path=path)
    print(f"wrote {path}: {len(rows)} rows")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config with scenario/noise/solver/pipeline/latency/experiment sections")
    common.add_argument("--seed", type=int, help="scenario and solver seed")
    common.add_argument("--threads", type=int, default=1, help="worker cap for experiment grids (default 1)")
    common.add_argument("--out", metavar="PATH", help=f"output file (default: ${OUT_DIR_ENV} or the current directory)")
    common.add_argument("--mode", choices=["range_only", "range_angle"], help="measurement mode")
    common.add_argument("--anchors", metavar="N|FRACTION", help="anchor count (integer) or fraction of nodes (decimal)")
    common.add_argument("--noise-profile", choices=sorted(NOISE_PROFILES), help="named noise model")
    common.add_argument("--log-level", default="INFO", help="logging level (default INFO)")

    p = argparse.ArgumentParser(prog="netloc", description="Joint range/AoA localization simulator and solver.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write a scenario file")
    g.add_argument("--n", type=int, help=f"node count (default {GENERATE_DEFAULT_N})")
    s = sub.add_parser("solve", parents=[common], help="run the localization pipeline on a scenario file")
    s.add_argument("scenario", help="scenario JSON written by 'generate'")
    e = sub.add_parser(
        "experiment", parents=[common],
        help="run an evaluation grid and write a CSV table",
        description=(
            "Tables start with '# config=' and '# seed=' lines. Columns: "
            "edges_sweep: seed,mode,edges,median_3d,p90_3d,rigid,dof,latency_s; "
            "anchor_sweep: seed,anchors,mode,median_3d,p90_3d,median_2d; "
            "latency: seed,target_median_3d,range_angle_edges,range_only_edges,"
            "range_angle_latency_s,range_only_latency_s,latency_ratio; "
            "registration: threshold,registered_fraction,false_positives,trials."
        ),
    )
    e.add_argument("name", help=f"one of: {', '.join(EXPERIMENTS)}")
    e.add_argument("--n", type=int, help="node count")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    handlers = {"generate": cmd_generate, "solve": cmd_solve, "experiment": cmd_experiment}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        _kv("config_error", error=repr(str(exc)))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, OrientationError, DisconnectedGraphError) as exc:
        _kv("solver_failure", error=repr(str(exc)))
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        _kv("io_error", error=repr(str(exc)))
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
