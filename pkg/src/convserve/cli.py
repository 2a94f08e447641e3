"""Command-line entry point: ``convserve run|sweep|stats|gen-trace``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConvServeError
from .simulator import SWEEP_AXES, RunConfig, rows_to_csv, run, sweep
from .workload import DEFAULT_MAX_CONTEXT, format_trace, load_trace, synthetic_traces, trace_stats


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.trace:
        cfg = cfg.replace(trace=args.trace, synthetic_conversations=0)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = cfg.with_value(key.strip(), value.strip())
    return cfg


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_run(args: argparse.Namespace) -> None:
    log: list[str] | None = [] if args.event_log else None
    report = run(_config(args), event_log=log)
    if log is not None:
        Path(args.event_log).write_text("".join(line + "\n" for line in log))
    if args.csv:
        Path(args.csv).write_text(report.records_csv())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    print(json.dumps(report.summary(), sort_keys=True, indent=1))


def cmd_sweep(args: argparse.Namespace) -> None:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = sweep(_config(args), args.axis, values)
    _write(args.csv, rows_to_csv(rows))


def cmd_stats(args: argparse.Namespace) -> None:
    traces = load_trace(args.trace, args.max_context)
    s = trace_stats(traces)
    print(f"conversations {s.n_conversations}")
    print(f"dropped {traces.dropped}")
    print(f"mean_turns {s.mean_turns:.4f}")
    print(f"mean_prompt_len {s.mean_prompt_len:.4f}")
    print(f"mean_output_len {s.mean_output_len:.4f}")


def cmd_gen_trace(args: argparse.Namespace) -> None:
    _write(args.output, format_trace(synthetic_traces(args.n, args.seed)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convserve", description="Multi-turn LLM serving simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--trace", help="conversation trace file (default: bundled sample)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("run", help="simulate one configuration")
    common(p)
    p.add_argument("--csv", help="write per-request records as CSV")
    p.add_argument("--json", help="write the full report as JSON")
    p.add_argument("--event-log", help="write the event log")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one run per value of a config axis")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--csv", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="summarize a trace file")
    p.add_argument("trace")
    p.add_argument("--max-context", type=int, default=DEFAULT_MAX_CONTEXT)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-trace", help="write a synthetic ShareGPT-like trace")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConvServeError, ValueError, KeyError, OSError) as exc:
        print(f"convserve: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
