"""Command line entry point: ``simulate``, ``run``, ``eval`` and ``sweep``.

Usage problems (unknown flags, missing inputs) exit with status 2, other
failures with status 1; either way a JSON object ``{"error", "message"}`` is
written to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..errors import CtFusionError
from ..solver import run_pipeline
from ..sim import simulate
from . import io
from .config import ConfigFile, build_config, load_config, override
from .metrics import EvalReport, ate_rmse


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return status


def _config(path) -> ConfigFile:
    if path is None:
        return build_config({})
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path)


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} directory not found: {path}")


def _tags(cfg: ConfigFile, dataset) -> dict:
    physical = sum(1 for a in dataset.anchors.values() if a.kind == "physical")
    run = cfg.run
    return {
        "A": run.anchor_count if run.anchor_count is not None else physical,
        "ranging": run.ranging_enabled,
        "virtual_anchors": run.va_enabled,
        "seed": cfg.world.seed,
        **{k: v for k, v in cfg.explicit.items() if isinstance(v, (int, float, str, bool))},
    }


def execute(dataset, cfg: ConfigFile, out: Path | None = None) -> EvalReport:
    """Run the estimator on ``dataset`` and score it against its ground truth."""
    run = cfg.run
    reports = []
    result = run_pipeline(dataset, report_sink=reports.append, **run.pipeline_kwargs())
    est = result.estimate
    gt = dataset.ground_truth
    rep = ate_rmse(est.t, est.position, gt.t, gt.position, tolerance=run.association_tolerance)
    if run.ranging_enabled and result.range_used.any():
        rep.outlier_precision, rep.outlier_recall, rep.outlier_fpr = result.outlier_scores(
            dataset.ranges.is_outlier_truth)
    rep.va_accepted = result.va_log.accepted
    rep.va_rejected = dict(result.va_log.rejected)
    rep.window_wall_time = [r.wall_time for r in reports]
    rep.tags = _tags(cfg, dataset)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        io.save_trajectory_csv(out / run.trajectory_file, est)
        io.atomic_write_text(out / run.window_report_file, "".join(r.to_json() + "\n" for r in reports))
        io.save_anchors(out / run.anchors_file, result.anchors)
        io.atomic_write_text(out / run.eval_file, rep.to_json() + "\n")
    return rep


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    world = cfg.world
    if args.seed is not None:
        cfg = override(cfg, "seed", str(args.seed))
        world = cfg.world
    io.save_dataset(simulate(world), args.out)
    print(json.dumps({"dataset": str(args.out), "seed": world.seed, "duration": world.duration}))
    return 0


def cmd_run(args) -> int:
    _require_dir(args.dataset, "dataset")
    cfg = _config(args.config)
    rep = execute(io.load_dataset(args.dataset), cfg, Path(args.out))
    print(rep.to_json())
    return 0


def cmd_eval(args) -> int:
    for p in (args.est, args.gt):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    est = io.load_trajectory_csv(args.est)
    gt = io.load_trajectory_csv(args.gt)
    rep = ate_rmse(est.t, est.position, gt.t, gt.position, tolerance=args.tolerance, align=not args.no_align)
    if args.out:
        io.atomic_write_text(args.out, rep.to_json() + "\n")
    print(rep.to_json())
    return 0


def _sweep_one(job):
    cfg, dataset_dir, out = job
    dataset = io.load_dataset(dataset_dir) if dataset_dir else simulate(cfg.world)
    tic = time.perf_counter()
    rep = execute(dataset, cfg, out)
    rep.tags["total_wall_time"] = time.perf_counter() - tic
    return rep


def cmd_sweep(args) -> int:
    if args.dataset is not None:
        _require_dir(args.dataset, "dataset")
    base = _config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    try:
        cfgs = [override(base, args.param, v) for v in values]
    except CtFusionError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out) if args.out else None
    jobs = [(c, args.dataset, out / f"{args.param}={v}" if out else None) for c, v in zip(cfgs, values)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [_sweep_one(j) for j in jobs]
    lines = []
    for v, rep in zip(values, reports):
        rep.tags["sweep"] = {"param": args.param, "value": v}
        lines.append(json.dumps({"param": args.param, "value": v, "report": json.loads(rep.to_json())},
                                sort_keys=True))
    if out:
        io.atomic_write_text(out / "sweep.jsonl", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctfusion", description="Continuous-time visual-inertial-ranging fusion.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    s.add_argument("--config", help="key=value config file (defaults if omitted)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="estimate a trajectory for a dataset directory")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE of a trajectory CSV against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tolerance", type=float, default=0.01, help="association tolerance in seconds")
    e.add_argument("--no-align", action="store_true", help="skip rigid alignment")
    e.add_argument("--out", help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="one run per value of a config key")
    w.add_argument("--param", required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--config")
    w.add_argument("--dataset", help="dataset directory; simulated from the config when omitted")
    w.add_argument("--out")
    w.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except CtFusionError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except OSError as exc:
        return _fail("io", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
