"""Command-line entry points.

Subcommands: pretrain (manufacture a frozen checkpoint), run (one continual
run), ablate (the component ladder), aka (pool-gated run on a mixed stream,
with a per-task decisions log), theory (Monte-Carlo bound sweeps), metrics
(recompute metrics from a stored accuracy matrix), report (aggregate records
into tables and figures).

The default output root is $HIDEPET_OUT, falling back to ./out.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import aka as aka_mod
from . import backbone, bench, config, hide, theory


def _out_dir(args) -> Path:
    root = Path(os.environ.get("HIDEPET_OUT", "out"))
    out = Path(args.out) if getattr(args, "out", None) else root
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfgs(args, overrides=None):
    parsed = config.parse_config_file(args.config) if getattr(args, "config", None) else None
    return config.resolve(parsed, seed=getattr(args, "seed", None), overrides=overrides)


def _get_checkpoint(cfgs, out: Path):
    top = cfgs["top"]
    if top.get("checkpoint"):
        return backbone.load_checkpoint(top["checkpoint"])
    pre = bench.make_pretext(cfgs["stream"])
    ckpt = backbone.pretrain(pre, cfgs["pretrain"])
    backbone.save_checkpoint(ckpt, out / "checkpoint.bin")
    return ckpt


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    cfgs = _load_cfgs(args)
    pre = bench.make_pretext(cfgs["stream"])
    ckpt = backbone.pretrain(pre, cfgs["pretrain"])
    path = out / "checkpoint.bin"
    backbone.save_checkpoint(ckpt, path)
    print(f"checkpoint written to {path} "
          f"(pretext accuracy {ckpt.meta['train_accuracy']:.3f}, "
          f"epochs {ckpt.meta['epochs_run']:.0f})")
    return 0


def _single_run(cfgs, out: Path, save_state=True):
    ckpt = _get_checkpoint(cfgs, out)
    stream_obj = bench.make_stream(cfgs["stream"])
    record, state, matrix, sidecar = bench.run_experiment(
        stream_obj, ckpt, cfgs["train"], config_hash=config.config_hash(cfgs)
    )
    bench.write_records([record], out / "records.jsonl")
    bench.save_matrix_csv(matrix, out / "matrix.csv")
    if save_state and cfgs["top"].get("save_state", True):
        hide.save_state(state, out / "state.bin")
    with open(out / "run_log.json", "w") as f:
        json.dump(sidecar, f)
    return record


def cmd_run(args) -> int:
    out = _out_dir(args)
    cfgs = _load_cfgs(args)
    record = _single_run(cfgs, out)
    m = record["metrics"]
    print(f"FAA {m['faa']:.2f}  CAA {m['caa']:.2f}  FFM {m['ffm']:.2f}  "
          f"ALA {m['ala']:.2f}  (records in {out / 'records.jsonl'})")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfgs = _load_cfgs(args)
    components = args.components.split(",") if args.components else list(hide.COMPONENT_PRESETS)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfgs["train"].seed]
    records = []
    for seed in seeds:
        stream_cfg = replace(cfgs["stream"], seed=seed)
        pre_cfg = replace(cfgs["pretrain"], seed=seed)
        ckpt = backbone.pretrain(bench.make_pretext(stream_cfg), pre_cfg)
        stream_obj = bench.make_stream(stream_cfg)
        for comp in components:
            tcfg = replace(cfgs["train"], seed=seed, components=comp)
            record, _, _, _ = bench.run_experiment(
                stream_obj, ckpt, tcfg, config_hash=config.config_hash(cfgs)
            )
            records.append(record)
            print(f"seed {seed} {comp:8s}: FAA {record['metrics']['faa']:.2f}")
    bench.write_records(records, out / "records.jsonl")
    bench.report(records, out)
    print(f"ablation table and figures in {out}")
    return 0


def cmd_aka(args) -> int:
    out = _out_dir(args)
    cfgs = _load_cfgs(args)
    lam = args.lambda_ood if args.lambda_ood is not None else cfgs["top"]["lambda_ood"]
    tcfg = replace(cfgs["train"], technique="lora")
    ckpt = _get_checkpoint(cfgs, out)
    stream_obj = bench.make_mixed_stream(cfgs["mixed"])
    record, state, pool, matrix = aka_mod.run_aka_experiment(
        stream_obj, ckpt, tcfg, ood_threshold=lam,
        config_hash=config.config_hash(cfgs),
    )
    bench.write_records([record], out / "records.jsonl")
    with open(out / "decisions.jsonl", "w") as f:
        for d in record["decisions"]:
            f.write(json.dumps(d, sort_keys=True) + "\n")
    if args.sweep:
        lams = [float(s) for s in args.sweep.split(",")]
        points = aka_mod.sweep_pool_size(stream_obj, ckpt, tcfg, lams)
        sweep_rec = {"kind": "aka_sweep", "seed": tcfg.seed, "points": points,
                     "scenario": stream_obj.scenario}
        bench.write_records([record, sweep_rec], out / "records.jsonl")
        with open(out / "pool_size_vs_lambda.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lambda_ood", "pool_size"])
            for p in points:
                w.writerow([p["lambda_ood"], p["pool_size"]])
    print(f"pool size {record['pool_size']}; FAA {record['metrics']['faa']:.2f}; "
          f"decisions in {out / 'decisions.jsonl'}")
    return 0


def cmd_theory(args) -> int:
    out = _out_dir(args)
    keys = list(theory.THEOREM_KEYS) if args.theorem == "all" else [args.theorem]
    all_pass = True
    rows = []
    for key in keys:
        reports = theory.run_theorem(key, args.n, args.seed)
        ok = all(r.passed for r in reports)
        all_pass &= ok
        worst = max(r.max_violation for r in reports)
        wit = next((r.witness.get("slack_fraction") for r in reports if r.witness), None)
        print(f"{key:9s}: {'PASS' if ok else 'FAIL'}  instances={sum(r.n for r in reports)}  "
              f"max_violation={worst:.3e}  witness_slack_fraction={wit}")
        for r in reports:
            rows.append([key, r.name, r.n, r.violations, r.max_violation, r.min_slack,
                         r.loss, r.bound])
    with open(out / "theory_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["family", "check", "instances", "violations", "max_violation",
                    "min_slack", "loss", "bound"])
        w.writerows(rows)
    print(f"slack table in {out / 'theory_report.csv'}")
    return 0 if all_pass else 1


def cmd_metrics(args) -> int:
    matrix = bench.load_matrix_csv(args.matrix)
    mets = bench.metrics(matrix, ala_literal=args.ala_literal)
    print(json.dumps(mets, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    records = bench.read_records(args.records)
    paths = bench.report(records, out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_schema(args) -> int:
    print(config.dump_schema())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hidepet", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_arg=True):
        if config_arg:
            sp.add_argument("--config", help="key=value config file (see `hidepet schema`)")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="output directory (default $HIDEPET_OUT or ./out)")

    sp = sub.add_parser("pretrain", help="train and freeze a desk-scale checkpoint")
    common(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("run", help="one continual-learning run over a synthetic stream")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("ablate", help="component ladder over one or more seeds")
    common(sp)
    sp.add_argument("--components",
                    help="comma list from naive,wtp,wtp+tii,wtp+tap,full (default all)")
    sp.add_argument("--seeds", help="comma list of seeds (default the config seed)")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("aka", help="pool-gated run on a mixed stream")
    common(sp)
    sp.add_argument("--lambda-ood", dest="lambda_ood", type=float,
                    help="OOD threshold for expand/retrieve")
    sp.add_argument("--sweep", help="comma list of thresholds for a pool-size sweep")
    sp.set_defaults(fn=cmd_aka)

    sp = sub.add_parser("theory", help="Monte-Carlo verification of the decomposition bounds")
    sp.add_argument("--theorem", default="all",
                    choices=["all", *theory.THEOREM_KEYS])
    sp.add_argument("--n", type=int, default=100000, help="instances per sweep")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_theory)

    sp = sub.add_parser("metrics", help="recompute metrics from a matrix.csv")
    sp.add_argument("matrix", help="CSV with task,stage,accuracy rows")
    sp.add_argument("--ala-literal", action="store_true",
                    help="use the pre-learning-stage learning-accuracy variant")
    sp.set_defaults(fn=cmd_metrics)

    sp = sub.add_parser("report", help="aggregate records.jsonl into tables and figures")
    sp.add_argument("records", help="records.jsonl from run/ablate/aka")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("schema", help="print the config schema with defaults")
    sp.set_defaults(fn=cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
