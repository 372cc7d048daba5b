"""Command-line entry point: ``dopp <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline as pl
from .generate import bp_multi_like, generate_netlist
from .netlist import NetlistError, write_netlist
from .ppa import EvaluationError


def _common() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given after the subcommand does not clobber one given before it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON document mirroring PipelineConfig")
    p.add_argument("--out", default=argparse.SUPPRESS, help="run directory")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="annealing seed")
    p.add_argument("--parallel", type=int, default=argparse.SUPPRESS, help="max concurrent evaluations")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


def _config(args) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.load(args.config) if getattr(args, "config", None) else pl.PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "parallel", None) is not None:
        cfg = replace(cfg, max_parallel_evals=args.parallel)
    if getattr(args, "netlist", None):
        cfg = replace(cfg, netlist_path=args.netlist)
    return cfg


def _out(args, cfg: pl.PipelineConfig | None = None, required: bool = True):
    out = getattr(args, "out", None) or (cfg.output_dir if cfg else None)
    if required and not out:
        raise SystemExit("error: --out <run directory> is required")
    return out


def _staged_config(args) -> None:
    """Persist a --parallel override into the run directory's stored config."""
    rd = pl.RunDirectory(_out(args))
    cfg = rd.config()
    changed = cfg
    if getattr(args, "parallel", None) is not None:
        changed = replace(changed, max_parallel_evals=args.parallel)
    if changed is not cfg:
        pl._write_json(rd.path(rd.CONFIG), {"config": changed.to_dict()})


def _emit(obj, as_json: bool) -> None:
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
    elif isinstance(obj, str):
        print(obj)
    else:
        for k, v in obj.items():
            print(f"{k}: {v}")


def cmd_synth_netlist(args) -> int:
    if args.bp_multi:
        nl = bp_multi_like(seed=args.design_seed, n_logic=args.logic, n_nets=args.nets)
    else:
        nl = generate_netlist(args.macros, args.clusters, args.logic, args.nets, seed=args.design_seed)
    write_netlist(nl, args.output)
    _emit({"written": args.output, "macros": nl.num_macros, "nets": nl.num_nets, "clusters": len(nl.clusters)}, args.json)
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    cands = pl.stage_generate(cfg, _out(args, cfg))
    d = len(cands[0].features) if cands else 0
    _emit({"candidates": len(cands), "feature_dim": d}, args.json)
    return 0


def cmd_design(args) -> int:
    core = pl.stage_design(_out(args))
    _emit({"coreset": len(core.indices), "threshold_used": core.threshold_used, "above_threshold": len(core.above_threshold)}, args.json)
    return 0


def cmd_evaluate(args) -> int:
    _staged_config(args)
    uids = [int(u) for u in args.uids.split(",")] if args.uids else None
    batch = pl.stage_evaluate(_out(args), uids=uids, which=args.stage)
    _emit(
        {
            "evaluated": len(batch.evaluated),
            "cached": len(batch.cached),
            "failed": len(batch.failures),
            "wall_seconds": round(batch.wall_seconds, 3),
            "cpu_seconds": round(batch.cpu_seconds, 3),
        },
        args.json,
    )
    return 1 if batch.failures else 0


def cmd_fit(args) -> int:
    verify = pl.stage_fit(_out(args))
    _emit({"verification_uids": verify}, args.json)
    return 0


def cmd_select(args) -> int:
    rep = pl.stage_select(_out(args))
    _emit({"best_uid": rep.best_uid, "composite_cost": rep.best_cost, "evaluations": rep.total_evaluations}, args.json)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    rep = pl.run_dopp(cfg, out_dir=_out(args, cfg, required=False))
    _emit(
        {
            "candidates": rep.candidate_count,
            "coreset": rep.result["coreset"]["size"],
            "evaluations": rep.total_evaluations,
            "best_uid": rep.best_uid,
            "composite_cost": rep.best_cost,
        },
        args.json,
    )
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    out = pl.budget_sweep(cfg, fractions, out_dir=_out(args, cfg, required=False), min_evals=args.min_evals)
    if args.json:
        _emit(out, True)
    else:
        print("fraction  evals  best_uid  best_cost")
        for p in out["curve"]:
            print(f"{p['fraction']:8.3f}  {p['evaluations']:5d}  {str(p['best_uid']):>8}  {p['best_cost']:.6g}")
    return 0


def cmd_seeds(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = pl.multi_seed(cfg, seeds, out_dir=_out(args, cfg, required=False), exhaustive=args.exhaustive)
    if args.json:
        _emit(out, True)
    else:
        print(f"dopp <= random in {out['dopp_not_worse_than_random']}/{out['trials']} seeds")
        for arm, stats in out["summary"].items():
            for metric, s in stats.items():
                print(f"{arm:10s} {metric:10s} {s['median']:.6g} [{s['min']:.6g}, {s['max']:.6g}]")
    return 0


def cmd_report(args) -> int:
    summary = pl.report(_out(args))
    _emit(summary if args.json else pl.format_report(summary), args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dopp", description=__doc__, parents=[common])
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
        p.set_defaults(func=func)
        return p

    p = add("synth-netlist", cmd_synth_netlist, "write a synthetic netlist")
    p.add_argument("output")
    p.add_argument("--bp-multi", action="store_true", help="26 macros / 18 clusters preset")
    p.add_argument("--macros", type=int, default=26)
    p.add_argument("--clusters", type=int, default=18)
    p.add_argument("--logic", type=int, default=600)
    p.add_argument("--nets", type=int, default=1500)
    p.add_argument("--design-seed", type=int, default=0)

    p = add("generate", cmd_generate, "anneal and write candidates.ndjson")
    p.add_argument("--netlist", help="netlist file (overrides the config)")
    add("design", cmd_design, "solve the design and write weights.json")
    p = add("evaluate", cmd_evaluate, "evaluate the coreset, the verification set or explicit uids")
    p.add_argument("--stage", choices=("coreset", "verify"), default="coreset")
    p.add_argument("--uids", help="comma-separated candidate uids")
    add("fit", cmd_fit, "fit the surrogate and write model.json")
    add("select", cmd_select, "select the final candidate and write report.json")
    p = add("run", cmd_run, "full pipeline")
    p.add_argument("--netlist")
    p = add("sweep", cmd_sweep, "budget sweep over design-weight prefixes")
    p.add_argument("--netlist")
    p.add_argument("--fractions", default="0.01,0.05,0.1,0.2,0.5,1.0")
    p.add_argument("--min-evals", type=int, default=10)
    p = add("seeds", cmd_seeds, "multi-seed protocol with a random arm")
    p.add_argument("--netlist")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p.add_argument("--exhaustive", action="store_true", help="also evaluate every candidate")
    add("report", cmd_report, "validate and summarise a run directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.json = getattr(args, "json", False)
    verbose = getattr(args, "verbose", 0) or 0
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pl.PipelineAbort, pl.IntegrityError, NetlistError, EvaluationError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
