"""Command-line entry point: ``predloop run|replay|analyze|dbbuild|report``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="predloop", description="Closed-loop evaluation of trajectory predictors.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("config")
    run.add_argument("-o", "--out", help="output directory (default: runs/<experiment name>)")
    run.add_argument("-j", "--workers", type=int, help="worker processes (PREDLOOP_THREADS overrides)")

    rep = sub.add_parser("replay", help="re-simulate a logged episode and verify it")
    rep.add_argument("log", help="episode log base path (the states CSV)")

    ana = sub.add_parser("analyze", help="normalisation and correlations from a metrics CSV")
    ana.add_argument("rows")
    ana.add_argument("-o", "--out", help="output directory (default: next to the input)")

    db = sub.add_parser("dbbuild", help="build a KNN trajectory database from episode logs")
    db.add_argument("logs", nargs="+")
    db.add_argument("-o", "--out", required=True, help="database CSV to write")

    report = sub.add_parser("report", help="rebuild and print the summary of an output directory")
    report.add_argument("dir")
    return p


def _run(args) -> int:
    from .harness import load_config, run_experiment, summary_text

    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    res = run_experiment(cfg, out, args.workers)
    sys.stdout.write(summary_text(res.result_rows, res.reports, cfg, res.failures))
    print(f"wrote {out}")
    return EXIT_OK


def _replay(args) -> int:
    from .episode_log import EpisodeLog
    from .sim import replay

    log = EpisodeLog.read(args.log)
    ok, tick = replay(log)
    if ok:
        print("verified")
        return EXIT_OK
    print(f"mismatch at tick {tick}", file=sys.stderr)
    return EXIT_RUNTIME


def _analyze(args) -> int:
    from .harness import analyze, summary_text

    res = analyze(args.rows, args.out)
    sys.stdout.write(summary_text(res.result_rows, res.reports))
    return EXIT_OK


def _dbbuild(args) -> int:
    from .episode_log import EpisodeLog
    from .predictors import build_database

    logs = [EpisodeLog.read(p) for p in args.logs]
    db = build_database(logs)
    db.save(args.out)
    print(f"{len(db)} entries -> {args.out}")
    return EXIT_OK


def _report(args) -> int:
    from .harness import analyze, summary_text

    rows = Path(args.dir) / "metrics.csv"
    if not rows.exists():
        raise FileNotFoundError(f"no metrics.csv in {args.dir}")
    res = analyze(rows, args.dir)
    sys.stdout.write(summary_text(res.result_rows, res.reports))
    return EXIT_OK


COMMANDS = {"run": _run, "replay": _replay, "analyze": _analyze, "dbbuild": _dbbuild, "report": _report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        print(f"predloop {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
