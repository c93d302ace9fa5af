"""Command line entry point: ``spde-deepsplit run|oracle|selftest``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, parse_config, reference_value, run_noise
from .paths import NoiseRealization


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--problem", help="heat-add, heat-mul, black-scholes or zakai")
    p.add_argument("--dim", type=int)
    p.add_argument("--horizon", dest="T", type=float, help="final time T")
    p.add_argument("--steps", dest="N", type=int, help="time steps N")
    p.add_argument("--seed", type=int)
    p.add_argument("--x-eval", dest="x_eval", help="scalar or comma list")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key, e.g. --set beta=0.5")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _overrides(args, keys):
    ov = {k: getattr(args, k) for k in keys}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def build_parser():
    ap = argparse.ArgumentParser(prog="spde-deepsplit",
                                 description="Deep splitting solver for parabolic SPDEs.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="train and evaluate independent runs, write CSV")
    _common(r)
    r.add_argument("--iters", dest="M", type=int, help="optimizer iterations per step")
    r.add_argument("--batch", type=int)
    r.add_argument("--runs", type=int)
    r.add_argument("--run-offset", dest="run_offset", type=int)
    r.add_argument("--schedule", help="learning rates as bound:rate,...")
    r.add_argument("--optimizer", choices=["adam", "sgd"])
    r.add_argument("--out", help="results CSV (default: stdout)")
    r.add_argument("--log", help="training loss CSV")
    r.add_argument("--noise-dump", dest="noise_dump", help="directory for noise path CSVs")
    r.add_argument("--net-dump", dest="net_dump", help="directory for network binaries")
    r.add_argument("--progress", action="store_true", help="print training progress to stderr")

    o = sub.add_parser("oracle", help="reference value for a run's noise path")
    _common(o)
    o.add_argument("--run", type=int, default=0, help="run index whose noise path is used")
    o.add_argument("--noise", help="noise CSV written by run --noise-dump")

    sub.add_parser("selftest", help="quick built-in property checks")
    return ap


def _cmd_run(args):
    keys = ["problem", "dim", "T", "N", "seed", "x_eval", "M", "batch", "runs", "run_offset",
            "schedule", "optimizer", "out", "log", "noise_dump", "net_dump"]
    cfg = parse_config(args.config, _overrides(args, keys))
    progress = None
    if args.progress:
        def progress(n, m, loss, lr):
            print(f"step {n} | iter {m} | loss {loss:.5g} | lr {lr:g}", file=sys.stderr)
    from .harness import run_experiment
    rep = run_experiment(cfg, progress)
    if not cfg.out:
        sys.stdout.write(rep.to_csv())
    else:
        print(f"rel L2 error {rep.rel_l2:.4g} over {len(rep.rows)} runs -> {cfg.out}",
              file=sys.stderr)
    return 1 if rep.failed else 0


def _cmd_oracle(args):
    cfg = parse_config(args.config, _overrides(args, ["problem", "dim", "T", "N", "seed", "x_eval"]))
    problem = cfg.make_problem()
    if args.noise:
        z = NoiseRealization.from_csv(args.noise)
        cfg.T, cfg.N = z.grid.T, z.grid.N
        problem = problem.with_T(z.grid.T)
    else:
        z = run_noise(cfg, problem, args.run)
    val, se = reference_value(cfg, problem, z, args.run)
    print(f"{val!r}" + (f" +- {se:.3g}" if se else ""))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            return _cmd_run(args)
        if args.cmd == "oracle":
            return _cmd_oracle(args)
        from .selftest import run_selftest
        return 0 if run_selftest() else 1
    except (ConfigError, OSError) as e:
        print(f"spde-deepsplit: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
