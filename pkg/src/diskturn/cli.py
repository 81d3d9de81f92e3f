"""Command line entry point.

Subcommands: collect (datasets), train (value ensembles), eval (one method),
compare (paired multi-method trials), gradcheck (finite-difference audit),
report (re-emit files from saved raw results). Exit code 0 on success,
nonzero on configuration or I/O errors.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import bench, datagen
from .model import EnvSpec, InputError
from .sim import SimConfig
from .solver import CostWeights, SolverConfig
from .valuefn import (
    NetSpec,
    TrainConfig,
    TrainingError,
    encode_input,
    save_ensemble,
    train,
    write_loss_curve,
)

ENV_SCHEMA = "diskturn-env-v1"


def load_config_bundle(path):
    """A config file is either a bare environment doc or a bundle with any of
    the keys spec/sim/solver/weights/task/train."""
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") == ENV_SCHEMA:
        return {"spec": doc}
    known = {"spec", "sim", "solver", "weights", "task", "train"}
    unknown = set(doc) - known
    if unknown:
        raise InputError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def _build_parts(bundle):
    spec = EnvSpec.from_json(bundle["spec"]) if "spec" in bundle else EnvSpec()
    sim = SimConfig.from_json(bundle["sim"]) if "sim" in bundle else SimConfig()
    solver = (
        SolverConfig.from_json(bundle["solver"]) if "solver" in bundle else SolverConfig()
    )
    weights = (
        CostWeights.from_json(bundle["weights"]) if "weights" in bundle else CostWeights()
    )
    task = bench.TaskSpec.from_json(bundle["task"]) if "task" in bundle else bench.TaskSpec()
    return spec, sim, solver, weights, task


def _out_dir(args) -> str:
    out = args.out or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_collect(args) -> int:
    bundle = load_config_bundle(args.config)
    spec, sim, solver, weights, _ = _build_parts(bundle)
    cfg = datagen.CollectConfig(
        n_samples=args.samples,
        base_seed=args.seed,
        spec=spec,
        sim=sim,
        solver=solver,
        weights=weights,
        workers=args.workers,
    )
    out = _out_dir(args)
    result = datagen.collect_to_dir(cfg, out)
    manifest = result["manifest"]
    print(
        f"collected {manifest['n_samples']} rollouts/mode in {manifest['wall_time']:.1f}s "
        f"({manifest['attempts']} attempts) -> {out}"
    )
    for key, path in result["datasets"].items():
        print(f"  mode {key}: {path}")
    return 0


def cmd_train(args) -> int:
    bundle = load_config_bundle(args.config)
    tdoc = dict(bundle.get("train", {}))
    tdoc.setdefault("seed", args.seed)
    if args.epochs is not None:
        tdoc["epochs"] = args.epochs
    if args.batch is not None:
        tdoc["batch_size"] = args.batch
    tcfg = TrainConfig.from_json(tdoc) if tdoc else TrainConfig(seed=args.seed)
    out = _out_dir(args)
    paths = sorted(
        p for p in os.listdir(args.data) if p.startswith("dataset_") and p.endswith(".jsonl")
    )
    if not paths:
        raise InputError(f"no dataset_*.jsonl files under {args.data}")
    for name in paths:
        samples, header = datagen.load_dataset(os.path.join(args.data, name))
        key = header["mode"]
        first = samples[0]
        dim = encode_input(first.tau.states[1], 1, first.zeta, first.tau.horizon).size
        ensemble = train(
            samples,
            NetSpec(input_dim=dim, hidden_dim=args.hidden),
            tcfg,
            n_members=args.members,
            contact_mode=key,
        )
        path = os.path.join(out, f"ensemble_{key}.json")
        save_ensemble(ensemble, path)
        write_loss_curve(ensemble, os.path.join(out, f"loss_{key}.csv"))
        val = np.asarray(ensemble.history["val_mse"]).mean(axis=1)
        print(
            f"mode {key}: {len(samples)} samples, M={args.members}, "
            f"val MSE {val[0]:.4f} -> {val[-1]:.4f} ({path})"
        )
    return 0


def _experiment_grid(args, methods, budgets):
    bundle = load_config_bundle(args.config)
    spec, sim, solver, weights, task = _build_parts(bundle)
    need_ens = [m for m in methods if m != "to"]
    ensembles = None
    if need_ens:
        if not args.ensembles:
            raise InputError(f"methods {need_ens} need --ensembles <dir>")
        keys = datagen.ContactSequence.from_json(task.sequence.to_json()).mode_keys()
        ensembles = bench.load_ensembles(args.ensembles, keys)
    grid = []
    for method in methods:
        for budget in budgets:
            grid.append(
                bench.ExperimentConfig(
                    method=method,
                    budget=budget,
                    n_trials=args.trials,
                    base_seed=args.seed,
                    alpha=args.alpha,
                    beta=args.beta,
                    ensembles=dict(ensembles) if method != "to" and ensembles else None,
                    spec=spec,
                    sim=sim,
                    solver=solver,
                    weights=weights,
                    task=task,
                )
            )
    return grid


def _print_report(report) -> None:
    for e in report["entries"]:
        s = e["summary"]
        print(
            f"{e['method']:>9s}/{e['budget']:<4s} median_angle={s['median_angle_difference']:.4f} "
            f"drop_rate={s['drop_rate']:.2f} wall/action={s['mean_wall_time_per_action']:.3f}s"
        )


def cmd_eval(args) -> int:
    grid = _experiment_grid(args, [args.method], [args.budget])
    report = bench.run_experiment(grid, workers=args.workers)
    paths = bench.emit_report(report, _out_dir(args))
    _print_report(report)
    print(f"report -> {paths['summary']}")
    return 0


def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    budgets = [b.strip() for b in args.budgets.split(",") if b.strip()]
    grid = _experiment_grid(args, methods, budgets)
    report = bench.run_experiment(grid, workers=args.workers)
    paths = bench.emit_report(report, _out_dir(args))
    _print_report(report)
    print(f"report -> {paths['summary']}")
    return 0


def cmd_gradcheck(args) -> int:
    report = bench.gradcheck(n=args.instances, tol=args.tol, seed=args.seed)
    for name, doc in report["suites"].items():
        status = "ok" if doc["pass"] else "FAIL"
        print(
            f"{name:16s} instances={doc['instances']:4d} "
            f"max_rel_err={doc['max_rel_err']:.3e} [{status}]"
        )
    print(f"runtime {report['runtime']:.1f}s")
    if args.out:
        out = _out_dir(args)
        with open(os.path.join(out, "gradcheck.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0 if report["pass"] else 1


def cmd_report(args) -> int:
    with open(args.raw) as fh:
        report = json.load(fh)
    if report.get("schema") != bench.REPORT_SCHEMA:
        raise InputError(f"{args.raw}: not a results file")
    paths = bench.emit_report(report, _out_dir(args))
    print(f"re-emitted -> {paths['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diskturn", description="planar disk-turning experiments"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed")
    common.add_argument("--config", default=None, help="JSON config path")
    common.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="collect offline datasets")
    p.add_argument("--samples", type=int, default=2000, help="rollouts per mode")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", parents=[common], help="train value ensembles")
    p.add_argument("--data", required=True, help="directory with dataset_*.jsonl")
    p.add_argument("--members", type=int, default=16)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    run_common = argparse.ArgumentParser(add_help=False)
    run_common.add_argument("--trials", type=int, default=50)
    run_common.add_argument("--alpha", type=float, default=bench.DEFAULT_ALPHA)
    run_common.add_argument("--beta", type=float, default=bench.DEFAULT_BETA)
    run_common.add_argument("--ensembles", default=None, help="ensemble directory")
    run_common.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", parents=[common, run_common], help="run one method")
    p.add_argument("--method", choices=bench.METHODS, required=True)
    p.add_argument("--budget", choices=tuple(bench.BUDGETS), default="high")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser(
        "compare", parents=[common, run_common], help="paired multi-method trials"
    )
    p.add_argument("--methods", default="avo,to,single_vf")
    p.add_argument("--budgets", default="high,low")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", parents=[common], help="re-emit report files")
    p.add_argument("--raw", required=True, help="results.json from a previous run")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InputError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
