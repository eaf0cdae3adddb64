"""Command-line entry point.

    tube-dpc generate-data --config c.json --seed 0 --out ident.csv
    tube-dpc train --variant e2e-g --config c.json --seed 0 --out ck.tdpc
    tube-dpc certify --checkpoint ck.tdpc --m-val 8000 --delta 0.05 \
        --mu-bound 0.9 --report report.json
    tube-dpc run --checkpoint ck.tdpc --config c.json --seed 0 --out-dir out/
    tube-dpc compare --checkpoints a.tdpc b.tdpc c.tdpc --out-dir out/
    tube-dpc report --trace out/trace.json --out-dir out/
    tube-dpc tube inspect --checkpoint ck.tdpc
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import certification as ct
from . import config as cf
from . import harness as hz
from . import models as md
from . import plant as pl
from . import training as tr
from . import tube


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=0)


def _schedule_from_meta(meta):
    sched = meta.get("schedule")
    if sched is None:
        return None
    return tube.TighteningSchedule(base_eps=meta.get("base_eps", 0.0),
                                   rho=meta.get("rho", 0.25),
                                   values=np.asarray(sched, dtype=np.float64))


def cmd_generate_data(args):
    cfg = cf.load_config(args.config)
    pcfg = cf.plant_config(cfg)
    dataset = pl.generate_dataset(pcfg, steps=cfg["dataset_steps"], seed=args.seed)
    pl.save_dataset_csv(args.out, dataset, pcfg)
    print(f"wrote {cfg['dataset_steps']} rows to {args.out}")


def cmd_train(args):
    cfg = cf.load_config(args.config)
    pcfg = cf.plant_config(cfg)
    tcfg = cf.train_config(cfg)
    trf = cf.tariff(cfg)
    if args.data:
        dataset = pl.load_dataset_csv(args.data, pcfg.n_zones)
    else:
        dataset = pl.generate_dataset(pcfg, steps=cfg["dataset_steps"], seed=args.seed)
    records = []
    result = tr.train_variant(args.variant, dataset, tcfg, seed=args.seed,
                              tariff=trf, records=records)
    meta = {"variant": args.variant, "seed": args.seed,
            "w_bound": result["w_bound"]}
    if result["schedule"] is not None and isinstance(result["schedule"], tube.TighteningSchedule):
        meta["schedule"] = result["schedule"].values.tolist()
        meta["base_eps"] = result["schedule"].base_eps
        meta["rho"] = result["schedule"].rho
    if result["certificate"] is not None:
        meta["certificate"] = result["certificate"].to_dict()
    md.save_checkpoint(args.out, result["policy"], result["dynamics"], meta=meta)
    if args.log:
        with open(args.log, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"trained {args.variant}: best validation composite "
          f"{result['best_val']:.6f}, checkpoint {args.out}")


def cmd_certify(args):
    cfg = cf.load_config(args.config)
    tcfg = cf.train_config(cfg)
    trf = cf.tariff(cfg)
    policy, dynamics, meta = md.load_checkpoint(args.checkpoint)
    section = dict(cfg["certification"])
    if args.m_val is not None:
        section["m_val"] = args.m_val
    if args.delta is not None:
        section["delta"] = args.delta
    if args.mu_bound is not None:
        section["mu_bound"] = args.mu_bound
    ccfg = ct.CertConfig(**section)
    n_x = dynamics.n_x
    box = tcfg.box(n_x, dynamics.n_u)
    report = ct.certify(policy, dynamics, ccfg, box, tcfg.horizon,
                        trf.window_from_step, np.random.default_rng(args.seed),
                        tightening=_schedule_from_meta(meta),
                        aux_low=tcfg.aux_low, aux_high=tcfg.aux_high)
    with open(args.report, "w") as fh:
        fh.write(report.to_json(indent=2))
        fh.write("\n")
    print(f"mu_tilde={report.mu_tilde:.6f} mu_wc={report.mu_wc:.6f} "
          f"pass={report.passed} -> {args.report}")
    return 0 if report.passed else 1


def _trace_to_json(trace):
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in trace.items()}


def _trace_from_json(d):
    return {k: np.asarray(v) for k, v in d.items()}


def cmd_run(args):
    import os

    cfg = cf.load_config(args.config)
    pcfg = cf.plant_config(cfg)
    tcfg = cf.train_config(cfg)
    trf = cf.tariff(cfg)
    run = cf.run_config(cfg, seed=args.seed)
    policy, dynamics, meta = md.load_checkpoint(args.checkpoint)
    plant_instance = pl.RCPlant(pcfg, seed=args.seed)
    metrics, trace = hz.deploy(policy, plant_instance, run, trf,
                               horizon=tcfg.horizon,
                               schedule=_schedule_from_meta(meta),
                               dynamics=dynamics, train_config=tcfg,
                               box=tcfg.box(pcfg.n_zones, pcfg.n_setpoints),
                               w_bound=meta.get("w_bound", 0.0))
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "trace.json"), "w") as fh:
        json.dump(_trace_to_json(trace), fh, sort_keys=True)
        fh.write("\n")
    paths = hz.report(trace, args.out_dir, comfort=tcfg.x_bounds, seed=args.seed)
    print(f"bill {metrics.electricity_bill_eur:.4f} EUR, violation "
          f"{metrics.temperature_violation_degc_step:.4f} degC-step -> {paths['summary']}")


def cmd_compare(args):
    import os

    cfg = cf.load_config(args.config)
    pcfg = cf.plant_config(cfg)
    tcfg = cf.train_config(cfg)
    trf = cf.tariff(cfg)
    run = cf.run_config(cfg, seed=args.seed)
    artifacts = {}
    for path in args.checkpoints:
        policy, dynamics, meta = md.load_checkpoint(path)
        artifacts[meta.get("variant", path)] = {
            "policy": policy, "schedule": _schedule_from_meta(meta)}
    rows, _ = hz.compare_variants(artifacts, pcfg, run, trf, horizon=tcfg.horizon)
    os.makedirs(args.out_dir, exist_ok=True)
    hz.write_comparison(os.path.join(args.out_dir, "comparison.csv"),
                        os.path.join(args.out_dir, "comparison.json"), rows)
    for row in rows:
        print(f"{row['variant']}: bill {row['electricity_bill_eur']:.4f} EUR, "
              f"violation {row['temperature_violation_degC_step']:.4f} degC-step")


def cmd_report(args):
    with open(args.trace) as fh:
        trace = _trace_from_json(json.load(fh))
    paths = hz.report(trace, args.out_dir)
    print(f"wrote {paths['temperatures']}, {paths['power']}, {paths['summary']}")


def cmd_tube_inspect(args):
    _, _, meta = md.load_checkpoint(args.checkpoint)
    cert = meta.get("certificate")
    if cert is None:
        print("checkpoint carries no tube certificate", file=sys.stderr)
        return 1
    print(json.dumps(cert, sort_keys=True, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tube-dpc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="excite the plant and dump a dataset CSV")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one controller variant")
    _add_common(p)
    p.add_argument("--variant", choices=tr.VARIANTS, required=True)
    p.add_argument("--data", default=None, help="dataset CSV (default: regenerate)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="line-delimited JSON training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="probabilistic validation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--m-val", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--mu-bound", type=float, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("run", help="deploy a checkpoint on the plant")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several checkpoints on one plant")
    _add_common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="re-emit plot-ready files from a trace")
    _add_common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("tube", help="tube certificate utilities")
    tube_sub = p.add_subparsers(dest="tube_command", required=True)
    pi = tube_sub.add_parser("inspect", help="dump a checkpoint's certificate JSON")
    _add_common(pi)
    pi.add_argument("--checkpoint", required=True)
    pi.set_defaults(func=cmd_tube_inspect)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
