"""Command line entry point: ``fedlabel simulate | preprocess | report``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import data
from .config import ConfigError, bundled_config_path, load_config
from .experiment import run_experiment
from .report import emit_report_rows, load_metrics

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fedlabel",
        description="Federated learning with heterogeneous labels and models via score aggregation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a federated experiment")
    sim.add_argument(
        "--config",
        required=True,
        help="experiment config file, or 'paper-topology' for the bundled one",
    )
    sim.add_argument("--seed", type=int, help="override the config seed")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    sim.add_argument("--threads", type=int, help="client worker threads (default: $FEDLABEL_THREADS or all cores)")

    pre = sub.add_parser("preprocess", help="turn accelerometer CSV into feature windows")
    pre.add_argument("--input", required=True, help="accelerometer CSV")
    pre.add_argument("--schema", help="column mapping file (default: timestamp,x,y,z,label)")
    pre.add_argument("--out", required=True, help="output directory")
    pre.add_argument("--seconds", type=float, default=data.WINDOW_SECONDS, help="window length in seconds")

    rep = sub.add_parser("report", help="rebuild summary and charts from a metrics.csv")
    rep.add_argument("--metrics", required=True, help="directory holding metrics.csv (or the file)")
    rep.add_argument("--out", required=True, help="output directory")
    return parser


def _overrides(pairs):
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _simulate(args) -> None:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    path = Path(args.config)
    if not path.exists() and args.config in ("paper-topology", "paper-topology.cfg"):
        path = bundled_config_path("paper-topology")
    cfg = load_config(path, overrides)
    result = run_experiment(cfg, args.out, workers=args.threads)
    last = result.metrics[-1]
    print(
        f"{len(result.metrics)} rounds; final global average accuracy "
        f"{100 * last.global_average_acc:.2f}%; results in {args.out}"
    )


def _preprocess(args) -> None:
    schema = data.load_schema(args.schema) if args.schema else data.CsvSchema()
    ingested = data.ingest_csv(args.input, schema)
    names = []
    for rec in ingested.recordings:
        if rec.label not in names:
            names.append(rec.label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = data.recordings_to_features(ingested.recordings, data.LabelUniverse(names or ["none"]), args.seconds)
    with open(out / "features.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", *(f"f{j}" for j in range(features.x.shape[1]))])
        for row, label in zip(features.x, features.y):
            w.writerow([names[label], *(repr(float(v)) for v in row)])
    info = {
        "recordings": len(ingested.recordings),
        "malformed_rows": ingested.malformed,
        "windows": len(features),
        "feature_length": int(features.x.shape[1]),
        "labels": names,
    }
    (out / "preprocess.json").write_text(json.dumps(info, indent=2), encoding="utf-8")
    print(f"{info['windows']} window(s) of {info['feature_length']} features; {ingested.malformed} malformed row(s)")


def _report(args) -> None:
    rows = load_metrics(args.metrics)
    for path in emit_report_rows(rows, args.out):
        print(path)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"simulate": _simulate, "preprocess": _preprocess, "report": _report}
    try:
        handlers[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"fedlabel {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
