"""Command line: ``dpnc run <config> [--jobs N] [--seed S] [--out DIR] [--key=value ...]``
and ``dpnc verify <results.csv>``."""
from __future__ import annotations

import argparse
import sys

from .harness import ConfigError, ExperimentConfig, emit_report, run_experiment, verify_results


def _split_overrides(extra: list[str]) -> dict:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"overrides must look like --key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dpnc")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment described by a config file")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    ver = sub.add_parser("verify", help="re-check certificates in a results.csv")
    ver.add_argument("results")
    args, extra = parser.parse_known_args(argv)

    if args.command == "verify":
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        ok, problems = verify_results(args.results)
        for p in problems:
            print(p)
        print("all certificates pass" if ok else f"{len(problems)} certificate failure(s)")
        return 0 if ok else 1

    try:
        overrides = _split_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.out is not None:
            overrides["out"] = args.out
        config = ExperimentConfig.load(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    results = run_experiment(config, jobs=max(1, args.jobs))
    files = emit_report(results, config.out)
    s = results.summary
    print(f"{config.experiment}: {s['rows']} rows, {s['failures']} failed trials, "
          f"ledger within target: {s['ledger_within_target']}")
    if "fitted_slope" in s:
        print(f"fitted log-log slope: {s['fitted_slope']:.4f}")
    for name, path in files.items():
        print(f"  {name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
