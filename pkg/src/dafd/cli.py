"""Command line entry point: ``dafd <prep|synth|tune|run|matrix|report>``.

Exit status is 0 on success, 2 when some training runs failed but a report
was still written, and 1 for usage, configuration or data errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .data import signal_filename, synthesize_signal, write_signal_file
from .errors import DafdError
from .signal import N_CLASSES, save_dataset_csv

log = logging.getLogger("dafd")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--data-dir", help="directory of load<i>_class<j> signal files (default: synthetic loads)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--windows-per-class", type=int)
    p.add_argument("--factor", type=int, help="normalization factor")
    p.add_argument("--lambda-d", type=float)
    p.add_argument("--lambda-mmd", type=float)
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--master-seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dafd", description="Domain adaptation benchmark for vibration fault diagnosis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="raw signal files -> per-load feature CSV dumps")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=int, default=1)
    p.add_argument("--loads", default="0,1,2,3")

    p = sub.add_parser("synth", help="write synthetic signal files for the four loads")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("f32", "csv"), default="f32")

    p = sub.add_parser("tune", help="select the normalization factor and the DANN/MMD weights on task 0-3")
    _common(p)

    p = sub.add_parser("run", help="one task and method over several seeds")
    _common(p)
    p.add_argument("--task", required=True, help="e.g. 0-3")
    p.add_argument("--method", required=True, choices=("none", "baseline", "dann", "mmd", "adabn"))
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("matrix", help="all tasks x methods x seeds")
    _common(p)
    p.add_argument("--seeds", type=int)

    p = sub.add_parser("report", help="rebuild the report table from a runs.csv file")
    p.add_argument("runs", help="runs.csv written by run or matrix")
    p.add_argument("--format", choices=("csv", "md"), default="md")
    return parser


def _config(args) -> harness.HarnessConfig:
    hcfg = harness.load_config(args.config) if args.config else harness.HarnessConfig()
    adapt = {}
    for flag, key in (("epochs", "epochs"), ("lambda_d", "lambda_d"), ("lambda_mmd", "lambda_mmd"), ("precision", "precision")):
        if getattr(args, flag, None) is not None:
            adapt[key] = getattr(args, flag)
    if adapt:
        hcfg.adaptation = replace(hcfg.adaptation, **adapt)
    for flag in ("data_dir", "windows_per_class", "factor", "master_seed", "workers", "seeds"):
        if getattr(args, flag, None) is not None:
            setattr(hcfg, flag, getattr(args, flag))
    if getattr(args, "out", None):
        hcfg.output_dir = args.out
    return hcfg


def cmd_prep(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loads = harness.DirectoryLoads(args.data_dir)
    for load in (int(v) for v in args.loads.split(",")):
        ds = loads.dataset(load, args.factor)
        path = out / f"load{load}.csv"
        save_dataset_csv(ds, path)
        print(f"{path}: {ds.features.shape[0]} x {ds.features.shape[1]}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = harness.SyntheticLoads(harness.SyntheticSpec(load_id=0, seed=args.seed))
    for load in harness.LOADS:
        spec = gen.spec_for(load)
        for c in range(N_CLASSES):
            write_signal_file(synthesize_signal(spec, c), out, args.format)
    print(f"wrote {len(harness.LOADS) * N_CLASSES} files to {out} (e.g. {signal_filename(0, 0, args.format)})")
    return EXIT_OK


def cmd_tune(args) -> int:
    hcfg = _config(args)
    loads = hcfg.loads()
    factor, scores = harness.select_normalization(loads, hcfg.adaptation)
    print(f"factor = {factor}  # validation accuracy {scores}")
    lines = [f"factor = {factor}"]
    for method, key in (("dann", "lambda_d"), ("mmd", "lambda_mmd")):
        lam, lscores = harness.select_lambda(method, loads, hcfg.adaptation, factor)
        print(f"{key} = {lam}  # validation accuracy {lscores}")
        lines.append(f"{key} = {lam}")
    out = Path(hcfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "tuned.cfg").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _finish(reports, hcfg) -> int:
    out = harness.write_report(reports, hcfg)
    print((out / "report.md").read_text(), end="")
    failed = [r for r in reports if r.failed_seeds]
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_run(args) -> int:
    hcfg = _config(args)
    method = "none" if args.method == "baseline" else args.method
    hcfg.methods = (method,)
    hcfg.tasks = (harness.TransferTask.parse(args.task),)
    return _finish(harness.run_matrix(hcfg), hcfg)


def cmd_matrix(args) -> int:
    hcfg = _config(args)
    return _finish(harness.run_matrix(hcfg), hcfg)


def cmd_report(args) -> int:
    reports = harness.read_runs_csv(args.runs)
    methods = [m for m in harness.REPORT_METHODS if any(r.method == m for r in reports)]
    if args.format == "csv":
        sys.stdout.write(harness.report_csv(reports, methods))
    else:
        sys.stdout.write(harness.report_markdown(reports, methods))
    return EXIT_OK


COMMANDS = {"prep": cmd_prep, "synth": cmd_synth, "tune": cmd_tune, "run": cmd_run, "matrix": cmd_matrix, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DafdError as exc:
        print(f"dafd: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"dafd: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
