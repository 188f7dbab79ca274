"""Command-line entry points: ``ngt <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime fault,
4 verification failure.  ``NGT_OUT_DIR`` sets the default output directory
and ``NGT_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4

log = logging.getLogger("ngt")


class UsageError(Exception):
    pass


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("NGT_OUT_DIR", "runs"))


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _load_cfg(args, **extra):
    from .config import load_config

    over = _overrides(getattr(args, "set", None))
    for k, v in extra.items():
        if v is not None:
            over[k] = v if isinstance(v, str) else v
    return load_config(getattr(args, "config", None), over)


def _refs_for(path, task):
    from .envs import read_refs

    if not path:
        return None
    refs = read_refs(path)
    if task not in refs:
        raise UsageError(f"refs manifest {path} has no entry for {task}")
    return refs[task]


def cmd_train_expert(args) -> int:
    from . import nn_core as nn
    from .config import write_manifest
    from .demos import train_expert
    from .envs import merge_refs

    cfg = _load_cfg(args, task=args.task, total_steps=args.budget)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy, refs, result = train_expert(cfg.task, args.seed, cfg.total_steps, cfg)
    nn.save_checkpoint(out / "expert.ckpt", {"policy": policy}, {"task": cfg.task, "seed": args.seed})
    refs_path = Path(args.refs) if args.refs else out / "refs.txt"
    merge_refs(refs_path, cfg.task, refs)
    write_manifest(out, cfg, extra={"seed": args.seed, "refs": [refs.random_return, refs.expert_return]})
    print(json.dumps({"task": cfg.task, "random_return": refs.random_return, "expert_return": refs.expert_return}))
    return EXIT_OK


def cmd_gen_demos(args) -> int:
    from . import nn_core as nn
    from .demos import collect, subsample
    from .sac import deterministic_policy

    if args.scripted:
        if args.task != "point_mass_reach":
            raise UsageError("the scripted controller only exists for point_mass_reach")
        from .demos import scripted_point_mass as policy
        expert_seed = None
    else:
        if not args.expert:
            raise UsageError("--expert checkpoint (or --scripted) is required")
        nets, meta = nn.load_checkpoint(args.expert)
        if meta.get("task") not in (None, args.task):
            raise UsageError(f"expert was trained on {meta['task']}, not {args.task}")
        policy = deterministic_policy(nets["policy"])
        expert_seed = meta.get("seed")
    demos = collect(policy, args.task, args.episodes, args.seed, args.mode, expert_seed)
    demos = subsample(demos, args.rate, args.offset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    demos.save(args.out)
    print(json.dumps({"out": str(args.out), "transitions": len(demos), "episodes": demos.n_episodes}))
    return EXIT_OK


def _run_bc(cfg, demos, seed, refs):
    import numpy as np

    from .demos import behavior_cloning
    from .envs import normalized_return
    from .training import evaluate_policy

    policy = behavior_cloning(demos, cfg.hidden, cfg.bc_iterations, cfg.bc_batch_size, cfg.bc_lr, rng=seed,
                              dtype=np.dtype(cfg.dtype).type)
    seeds = np.random.default_rng(seed).integers(2**31 - 1, size=cfg.eval_window)
    returns = evaluate_policy(cfg.task, policy, seeds)
    mean = float(np.mean(returns))
    return policy, mean, normalized_return(mean, refs) if refs else None


def cmd_imitate(args) -> int:
    import math

    from . import nn_core as nn
    from .config import write_manifest
    from .demos import DemonstrationSet
    from .training import METRIC_FIELDS, train_loop

    cfg = _load_cfg(args, task=args.task, method=args.method, demos=args.demos, refs=args.refs,
                    total_steps=args.steps, seeds=args.seeds)
    if not cfg.demos:
        raise UsageError("a demonstration file is required (--demos)")
    if not Path(cfg.demos).exists():
        raise UsageError(f"demonstration file {cfg.demos} does not exist")
    demos = DemonstrationSet.load(cfg.demos)
    if demos.meta.get("task") != cfg.task:
        raise UsageError(f"demonstrations are for {demos.meta.get('task')}, config says {cfg.task}")
    refs = _refs_for(cfg.refs, cfg.task)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, {"demos": cfg.demos, "refs": cfg.refs})
    summary = []
    for seed in cfg.seeds:
        metrics = out / f"seed{seed}.csv"
        if cfg.method in ("bc", "bc1"):
            if cfg.method == "bc1" and demos.meta.get("subsample_rate", 1) != 1:
                raise UsageError("bc1 trains on unsubsampled demonstrations; pass a rate-1 file")
            policy, mean, norm = _run_bc(cfg, demos, seed, refs)
            with open(metrics, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
                w.writeheader()
                w.writerow({"step": 0, "eval_return_mean": mean, "eval_return_norm": math.nan if norm is None else norm,
                            "reward_loss": math.nan, "critic_loss": math.nan, "actor_loss": math.nan, "alpha": math.nan})
            nn.save_checkpoint(out / f"seed{seed}_policy.ckpt", {"policy": policy}, {"task": cfg.task, "seed": seed})
        else:
            result = train_loop(cfg, seed, demos.inputs(cfg.input_mode), refs, metrics)
            result.agent.save(out / f"seed{seed}_agent.ckpt", {"task": cfg.task, "seed": seed})
            result.reward_model.save(out / f"seed{seed}_reward.ckpt")
            mean, norm = result.window_return, result.window_normalized
        summary.append({"seed": seed, "window_return": mean, "window_normalized": norm})
        print(json.dumps(summary[-1]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    import numpy as np

    from . import nn_core as nn
    from .envs import normalized_return
    from .training import evaluate_policy

    nets, meta = nn.load_checkpoint(args.checkpoint)
    if "policy" not in nets:
        raise UsageError(f"{args.checkpoint} holds no policy network")
    task = args.task or meta.get("task")
    if not task:
        raise UsageError("--task is required for checkpoints without task metadata")
    refs = _refs_for(args.refs, task)
    seeds = np.random.default_rng(args.seed).integers(2**31 - 1, size=args.episodes)
    returns = evaluate_policy(task, nets["policy"], seeds)
    mean = float(returns.mean())
    print(json.dumps({"task": task, "episodes": args.episodes, "return_mean": mean,
                      "normalized": normalized_return(mean, refs) if refs else None}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    out = _out_dir(args.out)
    results = run_checks(spectral_norm=not args.no_sn, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "verify.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("check", "passed", "value", "threshold", "detail"))
        w.writeheader()
        for r in results:
            w.writerow(r.as_row())
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_report(args) -> int:
    from .report import aggregate_runs

    rows = aggregate_runs(args.runs, args.refs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("task", "step", "mean", "min", "max", "n"))
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"out": str(out), "rows": len(rows)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngt", description="Imitation from random priors: training and verification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train-expert", help="train a SAC expert on the true reward")
    sp.add_argument("--task", required=True)
    sp.add_argument("--seed", type=int, default=100)
    sp.add_argument("--budget", type=int, help="environment steps")
    sp.add_argument("--refs", help="refs manifest to update (default OUT/refs.txt)")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_train_expert)

    sp = sub.add_parser("gen-demos", help="roll out an expert and write a demonstration file")
    sp.add_argument("--task", required=True)
    sp.add_argument("--expert", help="expert checkpoint")
    sp.add_argument("--scripted", action="store_true", help="use the scripted point-mass controller")
    sp.add_argument("--episodes", type=int, default=1)
    sp.add_argument("--rate", type=int, default=20)
    sp.add_argument("--offset", type=int, default=0)
    sp.add_argument("--mode", default="state_action")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_demos)

    sp = sub.add_parser("imitate", help="learn a policy from demonstrations")
    sp.add_argument("--task")
    sp.add_argument("--method")
    sp.add_argument("--demos")
    sp.add_argument("--refs")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seeds", help="space- or comma-separated seeds")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_imitate)

    sp = sub.add_parser("evaluate", help="deterministic evaluation of a policy checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task")
    sp.add_argument("--refs")
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("verify", help="run the bound and oracle checks")
    sp.add_argument("--no-sn", action="store_true", help="disable spectral normalization (negative control)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="aggregate metrics into plot-ready CSV")
    sp.add_argument("runs", nargs="+", help="run directories written by imitate")
    sp.add_argument("--refs", help="refs manifest used to normalize returns")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("NGT_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    from .config import ConfigError
    from .demos import DemoFormatError, ExpertTrainingError
    from .envs import UnknownTaskError
    from .nn_core import NumericFault

    try:
        return args.func(args)
    except (UsageError, ConfigError, DemoFormatError, UnknownTaskError, FileNotFoundError) as exc:
        print(f"ngt: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFault, ExpertTrainingError) as exc:
        print(f"ngt: runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
