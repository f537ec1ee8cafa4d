"""Command-line interface.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import theory
from .errors import InputError, NumericalError
from .experiment import (
    emit_summary,
    load_config,
    resolve_config,
    run_experiment,
    run_fit,
    run_lmc_method,
    summary_header,
)
from .gradcheck import check_gradients
from .presets import preset_names


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--config", type=Path, default=None, help="run configuration JSON")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--preset", choices=preset_names(), default=None, help="named benchmark target")
    p.add_argument("--quadrature", default=None, help="mc:N or gh:nodes")
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--iters", type=int, default=None, help="cap on map-parameter steps")
    p.add_argument("--eta-mf", type=float, default=None)
    p.add_argument("--eta-o", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotvi", description="Mean-field and rotated mean-field variational inference.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("fit-mfvi", "fit a product measure"),
        ("fit-rovi", "fit a rotated product measure"),
        ("sample-lmc", "run the Langevin baseline"),
        ("bounds", "print the closed-form bound report"),
    ):
        _common(sub.add_parser(name, help=text))
    exp = sub.add_parser("experiment", help="run all methods on a preset and write CSV/JSON artifacts")
    exp.add_argument("name", nargs="?", choices=preset_names(), help="preset name")
    _common(exp)
    gc = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    _common(gc)
    gc.add_argument("--points", type=int, default=20)
    return parser


def _resolve(args):
    raw = load_config(args.config) if args.config else None
    preset = getattr(args, "name", None) or args.preset
    if raw is None and preset is None:
        raise InputError("give --preset, a preset name, or --config with a target")
    overrides = {
        "seed": args.seed,
        "quadrature": args.quadrature,
        "restarts": args.restarts,
        "iters": args.iters,
        "eta_mf": args.eta_mf,
        "eta_o": args.eta_o,
    }
    return resolve_config(raw, preset, overrides)


def _out_dir(args):
    if args.out is None:
        return None
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {args.out}: {exc}") from None
    return args.out


def _dispatch(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    if args.command == "bounds":
        payload = summary_header(cfg, "bounds")
        payload["bounds"] = theory.bound_report(cfg.target).to_dict()
    elif args.command in ("fit-mfvi", "fit-rovi"):
        method = args.command.split("-")[1]
        run = run_fit(cfg, method, out)
        payload = summary_header(cfg, args.command)
        payload["methods"] = {method: run["summary"]}
        payload["timing"] = {f"{method}_seconds": run["seconds"]}
    elif args.command == "sample-lmc":
        run = run_lmc_method(cfg, out)
        payload = summary_header(cfg, "sample-lmc")
        payload["methods"] = {"lmc": run["summary"]}
        payload["timing"] = {"lmc_seconds": run["seconds"]}
    elif args.command == "experiment":
        payload = run_experiment(cfg, out)
        print(emit_summary(payload))
        return 0
    elif args.command == "gradcheck":
        rep = check_gradients(cfg.target, n_points=args.points, seed=cfg.seed)
        payload = summary_header(cfg, "gradcheck")
        payload["gradcheck"] = {**rep.to_dict(), "passed": rep.passed()}
        text = emit_summary(payload, None if out is None else out / "gradcheck.json")
        print(text)
        return 0 if rep.passed() else 2
    else:  # pragma: no cover - argparse rejects unknown commands
        raise InputError(f"unknown command {args.command}")
    print(emit_summary(payload, None if out is None else out / "summary.json"))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


cli_main = main


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
