"""Command-line front end: ``bblstm train | eval | diagnose | check``.

Configuration precedence, lowest to highest: RunConfig defaults, the JSON
file given by ``--config`` (a plain config or a run's ``metadata.json``),
then individual flags.  The output directory is ``--out``, else the
``BBLSTM_OUT`` environment variable, else the config's ``out_dir``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
(and 1 when ``check`` finds a failing property).
"""

from __future__ import annotations

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path

from . import cells, checks, diagnostics
from . import data as D
from .errors import ArchitectureMismatch, DataFormatError, NumericError, UsageError
from .stochastic import RngStream
from .training import RunConfig, evaluate, load_for_eval, resolve_out_dir, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DIAGNOSTICS = ("histogram", "correlation", "gradflow", "proposition", "synthetic")
DEFAULT_DELTAS = "0.001,0.005,8/1167"


# flag name -> RunConfig field
_OVERRIDES = {
    "variant": "variant",
    "task": "task",
    "hidden": "hidden",
    "layers": "layers",
    "epochs": "epochs",
    "lr": "lr",
    "lam": "lam",
    "tau": "tau",
    "seed": "seed",
    "eval_mode": "eval_mode",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2, which is our data-error code
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run config or a run's metadata.json")
    p.add_argument("--variant", choices=cells.VARIANTS)
    p.add_argument("--task", choices=("classify", "music", "mnist", "synthetic"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float, help="KL weight")
    p.add_argument("--tau", type=float, help="binary concrete temperature")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--eval-mode", choices=("mean", "sample"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bblstm", description="Stochastic-gate LSTM toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("diagnose", help="write diagnostic CSVs")
    _common(p)
    p.add_argument("--which", required=True, choices=DIAGNOSTICS)
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--draws", type=int, default=1000, help="Monte-Carlo draws per estimate")
    p.add_argument("--deltas", default=DEFAULT_DELTAS, help="comma-separated, fractions allowed")

    p = sub.add_parser("check", help="run the self-verification property suite")
    p.add_argument("--out", metavar="DIR", help="also write check_report.json here")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of a table")
    return parser


def config_from_args(args) -> RunConfig:
    doc = {}
    if args.config:
        doc = RunConfig.from_file(args.config).to_dict()
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[name] = value
    config = RunConfig.from_dict(doc)
    return config.replace(out_dir=resolve_out_dir(config, getattr(args, "out", None)))


def _parse_deltas(text: str) -> list[float]:
    try:
        return [float(Fraction(s.strip())) for s in text.split(",") if s.strip()]
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"cannot parse --deltas {text!r}") from None


def cmd_train(args) -> int:
    config = config_from_args(args)
    train(config, config.out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = config_from_args(args)
    model, params, task_data = load_for_eval(config, args.checkpoint)
    res = evaluate(model, params, task_data.test, config)
    print(json.dumps({"checkpoint": args.checkpoint, "split": "test", **res}))
    return EXIT_OK


def _probe_batch(config: RunConfig, task_data) -> D.Batch:
    return next(D.batch(task_data.test, config.batch_size))


def cmd_diagnose(args) -> int:
    config = config_from_args(args)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    which = args.which
    if which == "proposition":
        reports = diagnostics.verify_proposition1(_parse_deltas(args.deltas), args.draws, RngStream(config.seeds["sampler"]))
        print(diagnostics.write_proposition(out / "proposition.csv", reports))
        return EXIT_OK
    if which == "synthetic":
        path, _, _ = diagnostics.synthetic_correlation_demo(config, out, n_draws=args.draws, log=sys.stdout)
        print(path)
        return EXIT_OK
    if which == "correlation" and config.variant not in cells.BETA_VARIANTS:
        raise UsageError(f"correlation diagnostics need a Beta variant, not {config.variant!r}")
    if not args.checkpoint:
        raise UsageError(f"diagnose --which {which} needs --checkpoint")
    model, params, task_data = load_for_eval(config, args.checkpoint)
    b = _probe_batch(config, task_data)
    opts = cells.StepOptions("mean", config.tau)
    if which == "gradflow":
        norms = diagnostics.gradient_norm_trace(model, params, b, None, opts)
        print(diagnostics.write_gradient_trace(out / "gradflow.csv", norms))
        return EXIT_OK
    res = model.forward(params, b, None, opts)
    if which == "histogram":
        table = diagnostics.gate_histogram(res.unrolled.traces, args.bins, b.mask)
        for path in diagnostics.write_histograms(table, out):
            print(path)
        return EXIT_OK
    rows = diagnostics.timestep_correlation(
        config.variant, res.unrolled.traces[0], args.draws, RngStream(config.seeds["sampler"]), mask=b.mask
    )
    header = ("t", "mean_i", "mean_f", "rho", "se", "configs")
    print(diagnostics.write_csv(out / "correlation.csv", header, [[r[h] for h in header] for r in rows]))
    return EXIT_OK


def cmd_check(args) -> int:
    def show(r: checks.CheckResult):
        if not args.json:
            mark = "PASS" if r.passed else "FAIL"
            print(f"{mark}  {r.name}: {r.value:.6g} {r.relation} {r.threshold:g}  ({r.seconds:.1f}s)", flush=True)

    results = checks.check(show)
    report = checks.report_json(results)
    if args.json:
        print(report)
    else:
        print(f"{sum(r.passed for r in results)}/{len(results)} properties passed")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "check_report.json").write_text(report + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_USAGE


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ArchitectureMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
