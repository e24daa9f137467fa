"""Command-line entry point: ``fedadapt {run,sweep,validate,oracle}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiments import (
    SWEEP_AXES,
    ConfigError,
    ExperimentConfig,
    InvariantViolation,
    load_config,
    run_experiment,
    run_sweep,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2

log = logging.getLogger("fedadapt")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedadapt",
                                     description="Federated online adaptation simulator.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="YAML experiment config (defaults apply if omitted)")
        p.add_argument("--seed", type=_u64, help="override the config seed")
        p.add_argument("--engine", choices=("reference", "parallel"))
        if needs_out:
            p.add_argument("--out", required=True, help="output directory for CSV files")

    common(sub.add_parser("run", help="run one experiment"))
    sweep = sub.add_parser("sweep", help="run an axis sweep")
    common(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, help="overrides the config's sweep.axis")
    sweep.add_argument("--values", help="comma-separated values; overrides sweep.values")
    sweep.add_argument("--jobs", type=int, default=1, help="sweep points run in parallel")
    common(sub.add_parser("validate", help="check a config and exit"), needs_out=False)
    oracle = sub.add_parser("oracle", help="run the gradient, aggregation and degeneracy checks")
    oracle.add_argument("--seed", type=_u64, default=0)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.engine is not None:
        changes["engine"] = args.engine
    return cfg.with_overrides(**changes) if changes else cfg


def _sweep_spec(args, cfg: ExperimentConfig):
    axis = args.axis or (cfg.sweep.axis if cfg.sweep else None)
    if args.values is not None:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    else:
        values = list(cfg.sweep.values) if cfg.sweep else []
    if axis is None:
        raise ConfigError("sweep: no axis given (use --axis or a sweep section)")
    if not values:
        raise ConfigError("sweep: no values given (use --values or sweep.values)")
    return axis, values


def _print_summary(summary) -> None:
    for domain, m in summary.metrics.items():
        print(f"{summary.mode:8s} {domain:12s} frames={m.frames:6d} epe={m.epe:9.4f} "
              f"d1={m.d1:7.3f}%")
    if summary.rounds:
        print(f"rounds={summary.rounds} to_server={summary.mbps_to_server:.6g} MB/s "
              f"to_client={summary.mbps_to_client:.6g} MB/s")


def _oracle(seed: int) -> int:
    from .oracles import aggregation_oracle, degeneracy_oracle, gradient_oracle, partial_aggregation_example

    ok = True
    g = gradient_oracle(seed=seed)
    ok &= g.passed
    print(f"{'PASS' if g.passed else 'FAIL'} gradient: {g.failures} of {g.coordinates} "
          f"coordinates off, {g.seconds:.2f}s")
    ulps = aggregation_oracle(seed=seed)
    agg_ok = all(u <= 1 for u in ulps.values())
    _, after, expected, _ = partial_aggregation_example()
    agg_ok &= after == expected
    ok &= agg_ok
    print(f"{'PASS' if agg_ok else 'FAIL'} aggregation: max ulp by client count {ulps}")
    d = degeneracy_oracle(seed=seed)
    ok &= d.passed
    print(f"{'PASS' if d.passed else 'FAIL'} degeneracy: max |EPE diff| {d.max_abs_diff:.3g} "
          f"over {d.frames} frames")
    return EXIT_OK if ok else EXIT_INVARIANT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "oracle":
            return _oracle(args.seed)
        cfg = _load(args)
        if args.command == "validate":
            print(f"config ok: mode={cfg.mode} seed={cfg.seed}")
            return EXIT_OK
        if args.command == "run":
            result = run_experiment(cfg, args.out)
            _print_summary(result.summary)
            return EXIT_OK
        axis, values = _sweep_spec(args, cfg)
        for value, result in run_sweep(cfg, axis, values, args.out, jobs=args.jobs):
            print(f"{axis}={value}")
            _print_summary(result.summary)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
