"""Command-line entry point: ``ota-fl-sim {run,sweep,compare,verify-channel,emit-plot-data}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import config_hash, load_config_file, resolve_config
from .exceptions import ConfigError, DataParseError, SchemaError

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
_INPUT_ERRORS = (ConfigError, SchemaError, DataParseError, FileNotFoundError)


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def cmd_run(args):
    raw = load_config_file(args.config)
    cfg = resolve_config(raw, seed_override=args.seed_override)
    run_dir = harness.output_root(args.out) / f"run-{config_hash(cfg)}"
    hashes = {"config": harness.file_sha256(args.config)}
    result = harness.execute_run(cfg, run_dir, hashes)
    print(run_dir)
    if result.diverged:
        _err(f"training diverged in round {result.diverged_round}; partial results in {run_dir}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args):
    sweep = harness.load_sweep_file(args.config)
    tag = harness.file_sha256(args.config)[:12]
    out = harness.output_root(args.out) / f"sweep-{tag}"
    rows = harness.run_sweep(sweep, out, jobs=args.jobs, seed_override=args.seed_override)
    print(out / "sweep.csv")
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


def cmd_compare(args):
    raw = load_config_file(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    base = resolve_config(raw, seed_override=args.seed_override)
    out = harness.output_root(args.out) / f"compare-{config_hash(base)}"
    rows = harness.run_compare(raw, variants, out, jobs=args.jobs, seed_override=args.seed_override)
    for r in rows:
        print(f"{r['variant']:12s} final_accuracy={r['final_accuracy']:.4f} "
              f"window_accuracy={r['window_accuracy']:.4f}")
    print(out / "compare.csv")
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


def cmd_verify_channel(args):
    opts = {}
    if args.config:
        raw = load_config_file(args.config)
        chan = raw.get("channel", {})
        opts = {k: chan[k] for k in ("sigma2", "r_hat", "participation") if k in chan}
        if "K" in raw:
            opts["K"] = raw["K"]
        if "K_hat" in raw:
            opts["K_hat"] = raw["K_hat"]
    for name in ("K", "K_hat", "p_t", "sigma2", "r_hat", "participation", "K_fading", "seed"):
        val = getattr(args, name)
        if val is not None:
            opts[name] = val
    if args.trials < 10_000:
        raise ConfigError("need at least 10000 trials", field="trials")
    checks = harness.verify_channel(trials=args.trials, **opts)
    for c in checks:
        flag = "PASS" if c.ok else "FAIL"
        print(f"{flag}  {c.name:45s} measured={c.measured:.6g} expected={c.expected:.6g} "
              f"deviation={c.deviation:.3g} (limit {c.limit:g})")
    return EXIT_OK if all(c.ok for c in checks) else EXIT_FAIL


def cmd_emit_plot_data(args):
    out = args.out or "-"
    rows = harness.emit_plot_data(args.run_dirs, args.metric, None if out == "-" else out)
    if out == "-":
        print(",".join(harness.PLOT_COLUMNS))
        for r in rows:
            print(",".join(str(v) for v in r))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ota-fl-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=False):
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", help="output root (default $OTA_FL_SIM_OUT or ./runs)")
        sp.add_argument("--seed-override", type=int, dest="seed_override")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("run", help="train one configuration")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run a parameter sweep")
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="run several variants on one config")
    common(sp, jobs=True)
    sp.add_argument("--variants", default="NoROTA,COTAF,FedProx,NoisyProx,NoisyFedAvg,RobustComm")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify-channel", help="Monte-Carlo check of the channel model")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--trials", type=int, default=100_000)
    sp.add_argument("--K", type=int)
    sp.add_argument("--K-hat", type=int, dest="K_hat")
    sp.add_argument("--p-t", type=float, dest="p_t")
    sp.add_argument("--sigma2", type=float)
    sp.add_argument("--r-hat", type=float, dest="r_hat")
    sp.add_argument("--participation", type=float)
    sp.add_argument("--K-fading", type=int, dest="K_fading")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_verify_channel)

    sp = sub.add_parser("emit-plot-data", help="merge run CSVs into long format")
    sp.add_argument("run_dirs", nargs="+", type=Path)
    sp.add_argument("--metric", default="accuracy")
    sp.add_argument("--out", help="output CSV (default stdout)")
    sp.set_defaults(func=cmd_emit_plot_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        _err(exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
