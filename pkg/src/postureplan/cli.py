"""Command-line front end: run, sweep, bench, dump-map, dump-sdf."""
import argparse
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import geometry as geo
from .config import ConfigError, RunConfig, load_config, load_yaml, parse_config
from .distance_field import build_sdf, extrude_occupancy, save_sdf, write_slice_csv
from .mapping import MultiElevationMap, measurement_variance, save_snapshot
from .planner import plan
from .sim import (Task, TrialSpec, _clip_goal, make_world, point_clearance, render_depth,
                  run_trial, snapshot_from_world)

SWEEP_COLUMNS = ("param", "trials", "success_rate", "required_adaptation",
                 "mean_achieved_adaptation", "mean_plan_time", "median_plan_time", "max_plan_time",
                 "mean_sdf_time")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--param", type=float, help="confinement parameter (m)")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--trials", type=int, help="seeds per level (sweep) or trials (run)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="postureplan",
                                     description="Posture-adaptive planning in confined spaces.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one closed-loop trial")
    _common(run)
    run.add_argument("--dump-map", action="store_true", help="also write map.dump")
    run.add_argument("--dump-sdf", action="store_true", help="also write sdf_slice.csv")

    sweep = sub.add_parser("sweep", help="success rate and timing over a parameter range")
    _common(sweep)
    sweep.add_argument("--start", type=float)
    sweep.add_argument("--stop", type=float)
    sweep.add_argument("--step", type=float)
    sweep.add_argument("--workers", type=int)

    bench = sub.add_parser("bench", help="SDF build and planning wall-clock")
    _common(bench)
    bench.add_argument("--repeats", type=int, default=5)

    for name, what in (("dump-map", "elevation map"), ("dump-sdf", "signed distance field")):
        d = sub.add_parser(name, help=f"write the {what} seen from the start pose")
        _common(d)
        d.add_argument("--source", choices=("scan", "exact"), default="scan",
                       help="one depth scan, or the exact map of the world")
        if name == "dump-sdf":
            d.add_argument("--axis", choices=("x", "y", "z"), default="y")
            d.add_argument("--value", type=float, default=0.0)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        data = cfg.to_dict()
        for item in args.set:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}", source="--set")
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"{key}: not a section", source="--set")
            node[parts[-1]] = load_yaml(raw)
        cfg = parse_config(yaml.safe_dump(data, sort_keys=False), "--set")
    try:
        seeds = None
        if args.seed is not None or args.trials is not None:
            first = cfg.seeds[0] if args.seed is None else args.seed
            n = args.trials if args.trials is not None else len(cfg.seeds)
            if n < 1:
                raise ValueError("--trials must be >= 1")
            seeds = range(first, first + n)
        task = args.task
        param = args.param
        if task is not None and param is None and Task(task) is not Task(cfg.task):
            param = _default_param(task)
        return cfg.with_overrides(task=task, param=param, seeds=seeds, out=args.out)
    except ValueError as exc:
        raise ConfigError(str(exc), source="command line") from None


def _default_param(task) -> float:
    return {Task.THIN_GAP: 0.70, Task.LOW_OVERHANG: 0.225, Task.HIGH_CLEARANCE: 0.26,
            Task.CLEARANCE_BLOCK: 0.3, Task.COURSE: 0.25, Task.CORRIDOR: 0.70}[Task(task)]


def _run_dir(cfg: RunConfig, args, seed: int) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.out) / f"{Task(cfg.task).value}_{cfg.param:g}_seed{seed}"


def achieved_for(task, achieved: dict) -> float:
    """The posture percentage that matters for a task's confinement."""
    task = Task(task)
    if task in (Task.THIN_GAP, Task.CORRIDOR):
        return achieved["span"]
    if task in (Task.LOW_OVERHANG, Task.COURSE):
        return achieved["lower"]
    if task is Task.HIGH_CLEARANCE:
        return achieved["raise"]
    return max(achieved["raise"], achieved["lower"])


def ground_truth_clearance(path: np.ndarray, spec: TrialSpec, world) -> np.ndarray:
    """Per-sample gap between the collision spheres and the true world boxes."""
    model = spec.model
    coeffs = geo.coefficient_array(geo.generate_collision_points(model))
    P = geo.world_points(path, coeffs, model, model.span_offset)
    d = point_clearance(P.reshape(-1, 3), world).reshape(P.shape[:2])
    return np.min(d, axis=1) - model.collision_radius


def _json(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json)
        fh.write("\n")


def cmd_run(cfg: RunConfig, args) -> int:
    failures = 0
    for seed in cfg.seeds:
        spec = cfg.trial_spec(seed)
        world = make_world(spec.task, spec.param)
        report = run_trial(spec, world)
        out = _run_dir(cfg, args, seed)
        if len(cfg.seeds) > 1 and args.out:
            out = out / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        summary = report.summary()
        summary.update(task=Task(spec.task).value, param=spec.param, seed=seed,
                       adaptation=achieved_for(spec.task, report.achieved),
                       plans_detail=report.plans, wall_time=report.wall_time)
        write_json(out / "summary.json", summary)
        clearance = ground_truth_clearance(report.path, spec, world)
        with open(out / "trajectory.csv", "w") as fh:
            fh.write("t,x,y,z,phi,s,min_clearance\n")
            for t, row, cl in zip(report.times, report.path, clearance):
                fh.write(f"{t:.3f}," + ",".join(f"{v:.6f}" for v in row) + f",{cl:.6f}\n")
        (out / "config.yaml").write_text(cfg.with_overrides(seeds=[seed]).to_yaml())
        if args.dump_map and report.final_map is not None:
            save_snapshot(report.final_map, out / "map.dump")
        if args.dump_sdf and report.last_sdf is not None:
            write_slice_csv(report.last_sdf, out / "sdf_slice.csv", "y", float(report.path[-1, 1]))
        status = "success" if report.success else "FAILED"
        print(f"{Task(spec.task).value} {spec.param:g} seed {seed}: {status} ({report.reason}); "
              f"required {report.required_adaptation:.1f}%, "
              f"achieved {summary['adaptation']:.1f}%, "
              f"max plan {summary['max_plan_time']:.3f} s -> {out}")
        failures += not report.success
    return 1 if failures else 0


def sweep_rows(cfg: RunConfig, levels, workers: int = 1) -> list[dict]:
    """One row per level, assembled in level order whatever the worker count."""
    jobs = [(p, s) for p in levels for s in cfg.seeds]

    def one(job):
        p, s = job
        return run_trial(cfg.trial_spec(s, param=p))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, jobs))
    else:
        reports = [one(j) for j in jobs]
    rows = []
    for i, p in enumerate(levels):
        chunk = reports[i * len(cfg.seeds):(i + 1) * len(cfg.seeds)]
        pt = [q["plan_time"] for r in chunk for q in r.plans]
        st = [q["sdf_build_time"] for r in chunk for q in r.plans]
        ok = [r for r in chunk if r.success]
        rows.append({
            "param": p,
            "trials": len(chunk),
            "success_rate": len(ok) / len(chunk),
            "required_adaptation": chunk[0].required_adaptation,
            "mean_achieved_adaptation": (float(np.mean([achieved_for(cfg.task, r.achieved) for r in ok]))
                                         if ok else float("nan")),
            "mean_plan_time": float(np.mean(pt)) if pt else float("nan"),
            "median_plan_time": float(np.median(pt)) if pt else float("nan"),
            "max_plan_time": float(np.max(pt)) if pt else float("nan"),
            "mean_sdf_time": float(np.mean(st)) if st else float("nan"),
        })
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r['param']:g},{r['trials']}," + ",".join(
                f"{r[c]:.6f}" for c in SWEEP_COLUMNS[2:]) + "\n")


def cmd_sweep(cfg: RunConfig, args) -> int:
    rng = cfg.sweep
    kw = {k: getattr(args, k) for k in ("start", "stop", "step", "workers") if getattr(args, k) is not None}
    try:
        rng = replace(rng, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc), source="command line") from None
    levels = rng.levels()
    rows = sweep_rows(cfg, levels, rng.workers)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    name = f"sweep_{Task(cfg.task).value}.csv"
    write_sweep_csv(out / name, rows)
    print(f"{'param':>8} {'success':>8} {'required%':>10} {'achieved%':>10} {'plan_s':>8} {'max_s':>8}")
    for r in rows:
        print(f"{r['param']:8.3f} {r['success_rate']:8.2f} {r['required_adaptation']:10.1f} "
              f"{r['mean_achieved_adaptation']:10.1f} {r['mean_plan_time']:8.3f} {r['max_plan_time']:8.3f}")
    print(f"-> {out / name}")
    return 0


def _start_and_goal(spec: TrialSpec, world):
    rng = np.random.default_rng(spec.seed)
    jx, jy, jphi = rng.uniform(-1.0, 1.0, 3) * np.asarray(spec.start_jitter, dtype=float)
    start = spec.model.nominal_configuration(float(jx), float(jy), float(jphi))
    reach = spec.mapping.side_length / 2 - spec.model.l0 / 2 - spec.reach_margin
    waypoints = list(spec.waypoints or world.waypoints)
    goal, _ = _clip_goal(start, waypoints[0], reach)
    return start, goal, rng


def machine_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "numpy": np.__version__, "cpus": os.cpu_count()}


def bench(spec: TrialSpec, repeats: int = 5) -> dict:
    """Time SDF construction and planning on the exact map of the task world."""
    world = make_world(spec.task, spec.param)
    start, goal, _ = _start_and_goal(spec, world)
    snap = snapshot_from_world(world, center=tuple(start[:2]), params=spec.mapping)
    occ = extrude_occupancy(snap, spec.sdf_z_range)
    plan(start, goal, build_sdf(occ), spec.model, spec.planner)  # compile and warm caches
    sdf_times, plan_times, hashes = [], [], []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        sdf = build_sdf(occ)
        sdf_times.append(time.perf_counter() - t0)
        result = plan(start, goal, sdf, spec.model, spec.planner)
        plan_times.append(result.plan_time)
        hashes.append(result.trajectory_hash())
    return {
        "task": Task(spec.task).value, "param": spec.param, "repeats": repeats,
        "grid": list(occ.dims),
        "sdf_build_best": min(sdf_times), "sdf_build_mean": float(np.mean(sdf_times)),
        "plan_best": min(plan_times), "plan_mean": float(np.mean(plan_times)),
        "iterations": result.iterations, "collision_free": result.collision_free,
        "trajectory_hash": hashes[0], "deterministic": len(set(hashes)) == 1,
        "machine": machine_info(),
    }


def cmd_bench(cfg: RunConfig, args) -> int:
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1", source="command line")
    report = bench(cfg.trial_spec(), args.repeats)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "bench.json", report)
    g = report["grid"]
    print(f"{report['task']} {report['param']:g}: SDF {g[0]}x{g[1]}x{g[2]} "
          f"best {report['sdf_build_best'] * 1e3:.1f} ms mean {report['sdf_build_mean'] * 1e3:.1f} ms; "
          f"plan best {report['plan_best'] * 1e3:.1f} ms mean {report['plan_mean'] * 1e3:.1f} ms "
          f"({report['iterations']} iterations); hash {report['trajectory_hash'][:12]}")
    return 0


def initial_snapshot(spec: TrialSpec, source: str = "scan"):
    world = make_world(spec.task, spec.param)
    start, _, rng = _start_and_goal(spec, world)
    if source == "exact":
        return snapshot_from_world(world, center=tuple(start[:2]), params=spec.mapping)
    emap = MultiElevationMap(spec.mapping, center=start[:2])
    scan = render_depth(world, spec.sensor, start, rng)
    var = np.maximum(measurement_variance(scan.ranges, spec.mapping.noise_coeff), 1e-8)
    emap.ingest_scan(scan.points, var, body_z=start[geo.Z], sensor_origin=scan.origin)
    return emap.snapshot()


def cmd_dump_map(cfg: RunConfig, args) -> int:
    snap = initial_snapshot(cfg.trial_spec(), args.source)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshot(snap, out / "map.dump")
    xs, ys = snap.cell_centers()
    with open(out / "map.csv", "w") as fh:
        fh.write("x,y,floor_mean,floor_var,ceiling_mean,ceiling_var\n")
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                vals = (snap.floor_mean[i, j], snap.floor_var[i, j],
                        snap.ceiling_mean[i, j], snap.ceiling_var[i, j])
                if np.all(np.isnan(vals)):
                    continue
                fh.write(f"{x:.4f},{y:.4f}," + ",".join(f"{v:.6g}" for v in vals) + "\n")
    print(f"map {snap.shape[0]}x{snap.shape[1]} -> {out / 'map.dump'}")
    return 0


def cmd_dump_sdf(cfg: RunConfig, args) -> int:
    spec = cfg.trial_spec()
    snap = initial_snapshot(spec, args.source)
    sdf = build_sdf(extrude_occupancy(snap, spec.sdf_z_range))
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sdf(sdf, out / "sdf.dump")
    write_slice_csv(sdf, out / "sdf_slice.csv", args.axis, args.value)
    print(f"sdf {'x'.join(map(str, sdf.dims))} -> {out / 'sdf.dump'}")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "bench": cmd_bench,
            "dump-map": cmd_dump_map, "dump-sdf": cmd_dump_sdf}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
