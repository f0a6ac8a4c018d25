"""Command-line entry point.

Every subcommand reads an experiment JSON (``--config``; defaults to the
shipped scenario), writes its outputs under ``--out`` and logs to stderr.
``ENCHVAC_VERBOSITY`` (quiet | info | debug) controls logging only.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import ckks
from .building import ConfigError
from .ckks import serialize
from .harness import (
    ExperimentConfig,
    Setup,
    TrainingOptions,
    data_size_comparison,
    encrypted_bytes_per_trigger,
    load_config_file,
    run_closed_loop,
    sweep,
    train_trigger,
    write_rows_csv,
    write_trace_csv,
)
from .learning import dump_policy, write_curve_csv

log = logging.getLogger("enchvac")

_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging():
    level = _LEVELS.get(os.environ.get("ENCHVAC_VERBOSITY", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)


def _load(args):
    if args.config:
        cfg, extra = load_config_file(args.config)
    else:
        cfg, extra = ExperimentConfig(), {}
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, extra, out


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def cmd_simulate(args):
    cfg, _, out = _load(args)
    trace, metrics = run_closed_loop(cfg)
    metrics.to_json(out / "metrics.json")
    write_trace_csv(trace, out / "trace.csv")
    log.info("comm_rate %.2f%%  temp violations %.2f%%", metrics.comm_rate, metrics.violation_pct_temp)
    return 0


def cmd_train_trigger(args):
    cfg, extra, out = _load(args)
    opts = TrainingOptions.from_dict(extra.get("training"))
    if args.seed is not None:
        opts = replace(opts, learner=replace(opts.learner, seed=args.seed))
    setup = Setup(cfg)

    def progress(point):
        if point.iteration % 50 == 0:
            log.info("iter %d  cost %.3f  rate %.3f  entropy %.3f", point.iteration, point.mean_cost,
                     point.comm_rate, point.entropy)

    policy, curve = train_trigger(setup, opts, callback=progress)
    (out / "policy.bin").write_bytes(dump_policy(policy, opts.learner.digest()))
    write_curve_csv(curve, out / "learning_curve.csv")
    mode = "entropy" if opts.learner.beta > 0 else "learned"
    run_cfg = replace(cfg, trigger=mode, policy=str(out / "policy.bin"))
    _, metrics = run_closed_loop(run_cfg, setup)
    metrics.to_json(out / "metrics.json")
    log.info("trained policy: comm_rate %.2f%%  temp violations %.2f%%", metrics.comm_rate,
             metrics.violation_pct_temp)
    return 0


def cmd_sweep(args):
    cfg, extra, out = _load(args)
    spec = extra.get("sweep", {})
    parameter = args.parameter or spec.get("parameter", "alpha")
    values = args.values or spec.get("values")
    if values is None:
        raise SystemExit("sweep values missing: pass --values or add a sweep section to the config")
    values = [float(v) for v in values]
    opts = TrainingOptions.from_dict(extra.get("training"))
    rows = sweep(cfg, parameter, values, opts, log=lambda r: log.info(
        "%s=%g  rate %.2f%%  violations %.2f%%", r["parameter"], r["value"], r["comm_rate"],
        r["violation_pct_temp"]))
    write_rows_csv(rows, out / "sweep.csv")
    return 0


def cmd_keygen(args):
    cfg, _, out = _load(args)
    params = ckks.HeParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.he.items()})
    sk, pk, ek = ckks.keygen(params, seed=cfg.seed)
    (out / "secret.key").write_bytes(serialize.dump_secret_key(sk))
    (out / "public.key").write_bytes(serialize.dump_public_key(pk))
    (out / "eval.key").write_bytes(serialize.dump_eval_key(ek))
    _write_json({"params": asdict(params), "seed": cfg.seed}, out / "keys.json")
    return 0


def cmd_compare_size(args):
    cfg, _, out = _load(args)
    setup = Setup(cfg)
    event_cfg = cfg if cfg.trigger != "periodic" else replace(cfg, trigger="threshold", alpha=float("inf"))
    trace, metrics = run_closed_loop(event_cfg, setup)
    per_trigger = encrypted_bytes_per_trigger(setup, seed=cfg.seed)
    summary, rows = data_size_comparison(setup, trace, per_trigger)
    summary["comm_rate"] = metrics.comm_rate
    _write_json(summary, out / "data_size.json")
    write_rows_csv(rows, out / "data_size.csv")
    log.info("encrypted/plaintext bytes per trigger %.1f  event/periodic %.3f",
             summary["encrypted_over_plain"], summary["event_over_periodic"])
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="enchvac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment JSON (default: shipped scenario)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        return p

    common(sub.add_parser("simulate", help="closed-loop run; writes metrics.json and trace.csv")).set_defaults(
        func=cmd_simulate)
    common(sub.add_parser("train-trigger", help="train a trigger policy; writes policy.bin and "
                          "learning_curve.csv")).set_defaults(func=cmd_train_trigger)
    p = common(sub.add_parser("sweep", help="alpha or lambda trade-off sweep; writes sweep.csv"))
    p.add_argument("--parameter", choices=("alpha", "lam"))
    p.add_argument("--values", nargs="+", type=float)
    p.set_defaults(func=cmd_sweep)
    common(sub.add_parser("keygen", help="write secret, public and evaluation keys")).set_defaults(
        func=cmd_keygen)
    common(sub.add_parser("compare-size", help="cumulative communicated bytes per mode")).set_defaults(
        func=cmd_compare_size)
    return parser


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ckks.HeConfigError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
