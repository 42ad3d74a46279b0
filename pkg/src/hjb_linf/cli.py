"""Command-line front end: ``hjb-linf {train,evaluate,snapshot,check}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import struct
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checks
from .config import PRESETS, ConfigError, RunConfig, apply_overrides, load, preset
from .evaluation import CHANNELS, GridRequest, grid_snapshot, relative_errors, write_grid_csv
from .jet import init_network, load_params, save_params
from .trainer import train

log = logging.getLogger("hjb_linf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
OUT_ENV = "HJB_LINF_OUT"
TRACE_COLUMNS = ("iter", "domain_loss", "boundary_loss", "lr", "post_attack_residual_sq")


class RuntimeAbort(RuntimeError):
    pass


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_json_atomic(path: Path, obj) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trace_csv(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row.iteration] + [repr(float(v)) for v in row[1:]])


def resolve_config(args) -> RunConfig:
    if getattr(args, "run", None) and not (args.config or args.preset):
        cfg = load(Path(args.run) / "config.yaml")
    elif args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    elif args.config:
        cfg = load(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigError("no configuration: pass --config PATH or --preset NAME")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _thread_limit(spec: str):
    if spec == "single":
        return threadpool_limits(limits=1)
    try:
        k = int(spec)
    except ValueError:
        raise ConfigError(f"--threads must be an integer or 'single', got {spec!r}") from None
    if k < 1:
        raise ConfigError("--threads must be >= 1")
    if k > 1:
        log.warning("running with %d BLAS threads; bitwise reproducibility needs --threads single", k)
    return threadpool_limits(limits=k)


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = cfg.io.out_dir or os.environ.get(OUT_ENV) or "runs"
    return Path(root) / f"{cfg.content_hash()[:12]}-seed{cfg.train.seed}"


def _checkpoint_path(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if getattr(args, "run", None):
        return Path(args.run) / "checkpoints" / "final.ckpt"
    raise ConfigError("no checkpoint: pass --checkpoint PATH or --run DIR")


def _load_checked(path: Path, cfg: RunConfig):
    if not path.is_file():
        raise RuntimeAbort(f"checkpoint not found: {path}")
    try:
        params = load_params(path)
    except (ValueError, struct.error) as exc:
        raise RuntimeAbort(f"unreadable checkpoint {path}: {exc}") from exc
    want = cfg.network.dims(cfg.problem.n)
    if list(params.layer_dims) != want:
        raise ConfigError(f"checkpoint layer dims {list(params.layer_dims)} do not match config {want}")
    return params


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    problem = cfg.problem.build()
    run_dir = _run_dir(args, cfg)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfg.dumps())
    checkpoints = []
    every = cfg.io.checkpoint_every

    def on_iteration(i, params, row):
        if every and i % every == 0 and i < cfg.train.M:
            path = ckpt_dir / f"iter{i:06d}.ckpt"
            save_params(path, params)
            checkpoints.append(str(path))

    started = _now()
    net = init_network(cfg.network.dims(problem.n), cfg.train.seed)
    with _thread_limit(args.threads):
        record = train(problem, cfg.train, net, on_iteration=on_iteration)
        final = ckpt_dir / "final.ckpt"
        save_params(final, record.params)
        checkpoints.append(str(final))
        metrics = None
        if not record.aborted and problem.has_oracle and not args.skip_eval:
            metrics = relative_errors(record.params, problem, S=cfg.eval.S, seed=cfg.eval.seed,
                                      oracle_mc_samples=cfg.eval.oracle_mc_samples)
            print(metrics.as_percentages())
        grids = []
        if not record.aborted:
            for k, g in enumerate(cfg.eval.grids):
                req = GridRequest(**g)
                if not problem.has_oracle and req.channel not in ("value", "grad_norm"):
                    log.warning("skipping grid %d: channel %s needs an exact solution", k, req.channel)
                    continue
                snap = grid_snapshot(record.params, problem, req, cfg.eval.oracle_mc_samples, cfg.eval.seed)
                path = run_dir / f"grid{k:02d}_{req.channel}.csv"
                write_grid_csv(snap, path)
                grids.append(str(path))
    trace_path = run_dir / "trace.csv"
    write_trace_csv(trace_path, record.trace)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "seed": cfg.train.seed,
        "started_at": started,
        "finished_at": _now(),
        "duration_s": record.duration_s,
        "threads": args.threads,
        "metrics": metrics.to_dict() if metrics else None,
        "evaluations": [],
        "trace_path": str(trace_path),
        "checkpoints": checkpoints,
        "grids": grids,
        "iterations_completed": len(record.trace),
        "attack_faults": record.attack_faults,
        "abort_reason": record.abort_reason,
        "abort_iteration": record.abort_iteration,
    }
    write_json_atomic(run_dir / "manifest.json", manifest)
    print(f"run directory: {run_dir}")
    if record.aborted:
        print(f"training aborted: {record.abort_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    problem = cfg.problem.build()
    path = _checkpoint_path(args)
    params = _load_checked(path, cfg)
    if not problem.has_oracle:
        raise ConfigError("this problem has no exact solution to evaluate against")
    S = args.samples or cfg.eval.S
    with _thread_limit(args.threads):
        m = relative_errors(params, problem, S=S, seed=cfg.eval.seed, oracle_mc_samples=cfg.eval.oracle_mc_samples)
    print(m.as_percentages())
    manifest = path.parent.parent / "manifest.json" if path.parent.name == "checkpoints" else None
    if manifest is not None and manifest.is_file():
        doc = json.loads(manifest.read_text())
        doc.setdefault("evaluations", []).append({"checkpoint": str(path), "at": _now(), **m.to_dict()})
        write_json_atomic(manifest, doc)
    return EXIT_OK


def cmd_snapshot(args) -> int:
    if args.channel not in CHANNELS:
        raise ConfigError(f"unknown channel {args.channel!r}; choose from {', '.join(CHANNELS)}")
    cfg = resolve_config(args)
    problem = cfg.problem.build()
    params = _load_checked(_checkpoint_path(args), cfg)
    req = GridRequest(args.channel, x1_range=tuple(args.x1_range), x2_range=tuple(args.x2_range),
                      resolution=tuple(args.resolution), fixed=args.fixed, t=args.t)
    try:
        with _thread_limit(args.threads):
            snap = grid_snapshot(params, problem, req, cfg.eval.oracle_mc_samples, cfg.eval.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grid_csv(snap, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    with _thread_limit(args.threads):
        results = checks.run_all(quick=not args.full)
    print(checks.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjb-linf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_outputs=False):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--preset", help=f"built-in configuration ({', '.join(PRESETS)})")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
        p.add_argument("--threads", default="single", help="BLAS threads: an integer or 'single' (default)")
        if not run_outputs:
            p.add_argument("--run", help="run directory; supplies config.yaml and checkpoints/final.ckpt")
            p.add_argument("--checkpoint", help="checkpoint file")

    p = sub.add_parser("train", help="train a network and write a run directory")
    common(p, run_outputs=True)
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./runs, keyed by config hash)")
    p.add_argument("--skip-eval", action="store_true", help="do not compute final metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="relative L1, L2 and W11 errors of a checkpoint")
    common(p)
    p.add_argument("--samples", type=int, help="override eval.S")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("snapshot", help="write a 2-D grid of one channel to CSV")
    common(p)
    p.add_argument("--channel", default="value", help=f"one of {', '.join(CHANNELS)}")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--resolution", type=int, nargs=2, default=(101, 101), metavar=("NX", "NY"))
    p.add_argument("--x1-range", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--x2-range", type=float, nargs=2, default=(0.0, 1.0))
    p.add_argument("--fixed", type=float, help="value of x3..xn (default: problem-specific)")
    p.add_argument("--t", type=float, default=0.0)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("check", help="run the built-in invariant suites")
    p.add_argument("--full", action="store_true", help="20 random networks instead of 4")
    p.add_argument("--threads", default="single")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeAbort, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
