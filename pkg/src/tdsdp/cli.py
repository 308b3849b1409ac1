"""Command line: ``tdsdp run | presets | summarize``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness


def _load_config(args) -> harness.ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise harness.ConfigError("give exactly one of --config PATH or --preset NAME")
    if args.preset:
        table = harness.presets()
        if args.preset not in table:
            raise harness.ConfigError(f"unknown preset {args.preset!r}; available: {sorted(table)}")
        cfg = table[args.preset]
    else:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise harness.ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise harness.ConfigError(f"config is not valid JSON: {exc}") from exc
        cfg = harness.config_from_dict(doc)
    return harness.with_overrides(
        cfg, runs=args.runs, base_seed=args.seed, random_c=True if args.random_c else None
    )


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or f"out_{cfg.name}")

    def progress(done, total):
        if args.verbose:
            print(f"{done}/{total} runs", file=sys.stderr)

    report = harness.run(cfg, workers=args.workers, out_dir=out, progress=progress)
    failures = sum(p["failures"] for p in report.aggregates["points"])
    for name, path in report.files.items():
        print(f"{name}: {path}")
    print(f"{len(report.rows)} records, {failures} failed estimates")
    return 0


def _cmd_presets(args) -> int:
    table = harness.presets()
    if args.name:
        if args.name not in table:
            print(f"unknown preset {args.name!r}; available: {sorted(table)}", file=sys.stderr)
            return 2
        print(json.dumps(harness.config_to_dict(table[args.name]), indent=1, sort_keys=True))
        return 0
    for name, cfg in table.items():
        axes = " x ".join(f"{a.name}[{len(a.values)}]" for a in cfg.axes())
        print(f"{name:10s} {axes:28s} {','.join(cfg.estimators):28s} {cfg.description}")
    return 0


def _cmd_summarize(args) -> int:
    try:
        agg = harness.summarize(args.records)
    except harness.SummaryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = harness.dumps_aggregates(agg)
    if args.check:
        expected = Path(args.check).read_text()
        if expected != text:
            print(f"error: aggregates differ from {args.check}", file=sys.stderr)
            return 1
        print("aggregates match")
    if args.out:
        Path(args.out).write_text(text)
    elif not args.check:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tdsdp",
        description="Moving-source localization from round-trip delays: SDP estimators and experiments",
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write records/aggregates/plot data")
    r.add_argument("--config", help="experiment config (JSON)")
    r.add_argument("--preset", help="named preset, see 'tdsdp presets'")
    r.add_argument("--seed", type=int, help="base seed (unsigned 64-bit)")
    r.add_argument("--runs", type=int, help="Monte Carlo runs per grid point (K)")
    r.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    r.add_argument("--out", help="output directory (default out_<name>)")
    r.add_argument("--random-c", action="store_true", help="draw c per run from c_range")
    r.add_argument("-v", "--verbose", action="store_true", help="print progress to stderr")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("presets", help="list presets, or print one as JSON")
    s.add_argument("name", nargs="?")
    s.set_defaults(func=_cmd_presets)

    m = sub.add_parser("summarize", help="recompute aggregates from a records file")
    m.add_argument("records")
    m.add_argument("--out", help="write aggregates here instead of stdout")
    m.add_argument("--check", metavar="AGGREGATES", help="compare with an existing aggregates file")
    m.set_defaults(func=_cmd_summarize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
