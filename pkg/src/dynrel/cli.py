"""Command-line entry point: run a sweep from a YAML config."""

from __future__ import annotations

import argparse
import logging
import sys

from .channel import PRESETS, burst_preset, stationary_loss
from .experiment import (BURST_TARGETS, ConfigError, format_table, load_config, rows_to_csv, run_sweep,
                         summarize, summary_json)
from .policy import POLICY_NAMES
from .sim import SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


def list_presets() -> str:
    out = ["links:"]
    for name, p in PRESETS.items():
        out.append(f"  {name:<7} {p.capacity_bps / 1e6:g} Mb/s  delay {p.base_delay_us / 1000:g} ms  "
                   f"jitter {p.jitter_std_us / 1000:g} ms  loss {p.loss.p:g}")
    out.append("burst losses (p_bg=0.5, loss_good=0, loss_bad=0.5):")
    for target in BURST_TARGETS:
        ge = burst_preset(target)
        out.append(f"  target {target:g}: p_gb={ge.p_gb:.6f}  stationary={stationary_loss(ge):.6f}")
    out.append("policies: " + ", ".join(POLICY_NAMES) + ", static")
    return "\n".join(out) + "\n"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynrel-sweep", description=__doc__)
    ap.add_argument("--config", help="sweep config (YAML)")
    ap.add_argument("--output", default="sweep.csv", help="CSV path, '-' for stdout (default: %(default)s)")
    ap.add_argument("--summary", help="write the JSON summary here")
    ap.add_argument("--seed", type=int, help="override the config's base seed")
    ap.add_argument("--runs", type=int, help="override runs_per_cell")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes (default: %(default)s)")
    ap.add_argument("--list-presets", action="store_true", help="print link, loss and policy presets")
    ap.add_argument("-q", "--quiet", action="store_true", help="don't print the summary table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    if args.list_presets:
        sys.stdout.write(list_presets())
        return EXIT_OK
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg.seed = args.seed
        if args.runs is not None:
            if args.runs < 1:
                raise ConfigError("--runs must be >= 1")
            cfg.runs_per_cell = args.runs
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"config error in {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        rows = run_sweep(cfg, jobs=args.jobs)
    except SimulationError as e:
        print(f"invariant breach: {e}", file=sys.stderr)
        return EXIT_INVARIANT

    text = rows_to_csv(rows)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        with open(args.output, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    summary = summarize(rows)
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as f:
            f.write(summary_json(summary))
    if not args.quiet and args.output != "-":
        sys.stdout.write(format_table(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
