"""Command-line entry point.

Subcommands: train-mqar, eval-mqar, sweep, gradcheck, trace,
simulate-cache, emit-plots. Exit codes: 0 success, 2 configuration or
input-format error, 3 numeric failure, 4 I/O failure.

Heavy imports happen inside the handlers so that ``--threads`` can pin the
BLAS thread pools through environment variables before the first numpy
import; ``--threads 1`` is the bit-reproducible mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def set_thread_count(n: int) -> None:
    if "numpy" in sys.modules:
        print("warning: numpy already imported; thread pinning may not apply",
              file=sys.stderr)
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(n)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config path")
    p.add_argument("--preset", help="named preset (desk, toy8, shape-1024, fullscale)")
    p.add_argument("--seed", type=int, help="override run seed")
    p.add_argument("--out-dir", help="override output directory")
    p.add_argument("--steps", type=int, help="override step count")


def _load_run(args):
    from .config import load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if args.config is None and args.preset is None:
        overrides.setdefault("preset", "desk")
    return load_config(path=args.config, preset=args.preset, overrides=overrides)


def _parse_settings(text: str):
    from .mqar import SETTINGS7

    if text == "all7":
        return list(SETTINGS7)
    out = []
    for part in text.split(","):
        try:
            n, l = part.strip().split("x")
            out.append((int(n), int(l)))
        except ValueError:
            from .errors import ConfigError

            raise ConfigError(f"bad setting {part!r}; expected like 4x64 or all7")
    return out


def cmd_train(args) -> int:
    from .train import train

    run = _load_run(args)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    summary = train(run, log=log)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    from .train import eval_checkpoint

    result = eval_checkpoint(
        args.checkpoint,
        _parse_settings(args.settings),
        seed=args.seed if args.seed is not None else 0,
        n_instances=args.instances,
    )
    print(json.dumps(result, indent=2))
    return 0


def cmd_sweep(args) -> int:
    from .plots import emit_plot_data
    from .train import run_sweep

    run = _load_run(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_sweep(run, args.axis, seeds)
    os.makedirs(run.out_dir, exist_ok=True)
    rows_path = os.path.join(run.out_dir, "sweep.jsonl")
    with open(rows_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    csv_path = os.path.join(run.out_dir, "plot.csv")
    emit_plot_data(rows, csv_path)
    print(json.dumps({"rows": len(rows), "sweep": rows_path, "plot": csv_path}))
    return 0


def cmd_gradcheck(args) -> int:
    from .errors import NumericError
    from .train import layer_grad_check

    gammas = [float(g) for g in args.gammas.split(",")]
    failed = False
    for gamma in gammas:
        rep = layer_grad_check(gamma, seed=args.seed if args.seed is not None else 0,
                               rel_tol=args.tol, n_coords=args.coords)
        status = "ok" if rep.ok else "FAIL"
        print(f"gamma={gamma}: max_rel_err={rep.max_rel_err:.3e} "
              f"checked={rep.n_checked} skipped={rep.n_skipped} {status}")
        failed = failed or not rep.ok
    if failed:
        raise NumericError("gradient check failed; see per-gamma report above")
    return 0


def cmd_trace(args) -> int:
    import numpy as np

    from .errors import ConfigError
    from .model import Model
    from .mqar import generate_mqar
    from .traces import export_heatmap_csv, save_trace

    run = _load_run(args)
    if args.checkpoint:
        model = Model.load(args.checkpoint)
    else:
        model = Model(run.model_config(), seed=run.seed)
    if model.cfg.kind != "slot":
        raise ConfigError("access traces exist only for the slot model kind")
    inst = generate_mqar(run.task.mqar(run.seed))
    events: list = []
    model.forward(inst.tokens[None, :], trace=events)
    save_trace(args.out, events)
    result = {"events": len(events), "trace": args.out}
    if args.heatmap:
        export_heatmap_csv(args.heatmap, events, n_slots=model.cfg.capacity)
        result["heatmap"] = args.heatmap
    print(json.dumps(result))
    return 0


def cmd_simulate_cache(args) -> int:
    from .cachesim import CacheSimConfig, simulate_cache
    from .traces import load_trace

    events = load_trace(args.trace)
    stats = simulate_cache(events, CacheSimConfig(capacity=args.capacity, policy=args.policy))
    print(json.dumps(stats.as_dict()))
    return 0


def cmd_emit_plots(args) -> int:
    from .errors import ConfigError
    from .plots import emit_plot_data

    rows = []
    with open(args.sweep) as fh:
        for line in fh:
            line = line.strip()
            if line:
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"bad sweep row: {exc}")
    emit_plot_data(rows, args.out)
    print(json.dumps({"rows": len(rows), "plot": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="slotmem",
        description="Sparse slot-memory sequence model: training, eval, and analysis tools",
    )
    ap.add_argument("--threads", type=int, help="BLAS/OpenMP thread count (1 = reproducible)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-mqar", help="train a model on the recall task")
    _add_common(p)
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-mqar", help="evaluate a checkpoint across settings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--settings", default="4x64", help='e.g. "4x64,8x64" or "all7"')
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, default=64)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="train across an ablation axis and emit plot data")
    _add_common(p)
    p.add_argument("--axis", default="kind", choices=("order", "capacity", "kind"))
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the memory layer")
    p.add_argument("--gammas", default="0,0.5,1,2")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=6)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("trace", help="record slot access events for one sequence")
    _add_common(p)
    p.add_argument("--checkpoint", help="use a trained checkpoint instead of fresh init")
    p.add_argument("--out", required=True, help="trace JSONL path")
    p.add_argument("--heatmap", help="also export a slot-by-time CSV here")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("simulate-cache", help="replay a trace through an LRU cache")
    p.add_argument("--trace", required=True)
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--policy", default="LRU")
    p.set_defaults(fn=cmd_simulate_cache)

    p = sub.add_parser("emit-plots", help="convert sweep rows to the plot CSV")
    p.add_argument("--sweep", required=True, help="sweep.jsonl from the sweep command")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(fn=cmd_emit_plots)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        set_thread_count(args.threads)
    from .errors import ConfigError, NumericError, TraceFormatError

    try:
        return args.fn(args)
    except (ConfigError, TraceFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
