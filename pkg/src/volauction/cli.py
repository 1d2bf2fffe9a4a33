"""Command-line surface: train, evaluate, vcg, compare, run-auction, convert-bid.

Exit codes: 0 success, 2 validation failure, 3 configuration problem,
4 numeric divergence. Errors print one machine-parsable line to stderr
(`error=<code> msg="..."`). Output files are written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import (
    AuctionError,
    BidValidationError,
    FlatDiscountBid,
    convert_flat_to_lot,
    make_lot_grid,
    make_schedule,
    validate_bid,
)
from .evaluate import MetricsReport, compare, evaluate
from .fileio import atomic_write_text, canonical_json
from .nets import (
    FingerprintMismatchError,
    LearnedMechanism,
    encode_bids,
    load_mechanism,
    round_allocation,
    save_mechanism,
)
from .scenario import ConfigError, Scenario, default_scenario, scenario_from_text, scenario_to_text
from .training import TrainerConfig, TrainingDivergedError, train
from .vcg import vcg_payments

BIDS_FORMAT = "volauction-bids"
SCENARIO_DIR_ENV = "VOLAUCTION_SCENARIO_DIR"


def _fail(code: int, err: str, message: str):
    print(f'error={err} msg="{message}"', file=sys.stderr)
    raise SystemExit(code)


def _exit_code_for(exc: AuctionError) -> int:
    if isinstance(exc, (ConfigError, FingerprintMismatchError)):
        return 3
    if isinstance(exc, TrainingDivergedError):
        return 4
    return 2


def _load_scenario(path: str | None) -> Scenario:
    if path is None or path == "default":
        return default_scenario()
    if not os.path.exists(path):
        search = os.environ.get(SCENARIO_DIR_ENV)
        if search and os.path.exists(os.path.join(search, path)):
            path = os.path.join(search, path)
        else:
            _fail(3, "config", f"scenario file not found: {path}")
    with open(path) as fh:
        return scenario_from_text(fh.read())


def _load_bid_file(path: str):
    if not os.path.exists(path):
        _fail(3, "config", f"bid file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != BIDS_FORMAT:
        _fail(3, "config", f"not a bid file: {path}")
    grid = make_lot_grid(int(doc["total_units"]), int(doc["lot_count"]))
    reserve = float(doc["reserve_price"])
    schedules = []
    for record in doc["consumers"]:
        schedule = make_schedule([float(p) for p in record["prices"]],
                                 int(record["requirement"]), grid)
        schedules.append(validate_bid(schedule, reserve, grid))
    return grid, reserve, schedules


def _apply_config_file(args: argparse.Namespace, defaults_by_command: dict):
    """Config file supplies defaults; explicitly passed flags win."""
    if not getattr(args, "config", None):
        return args
    if not os.path.exists(args.config):
        _fail(3, "config", f"config file not found: {args.config}")
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            _fail(3, "config", f"config file is not valid JSON: {exc}")
    parser_defaults = defaults_by_command.get(args.command, {})
    for key, value in doc.get(args.command, {}).items():
        attr = key.replace("-", "_")
        if attr not in parser_defaults:
            _fail(3, "config", f"unknown config key {key!r} for {args.command}")
        # still at the parser default => the flag was not given on the CLI
        if getattr(args, attr) == parser_defaults[attr]:
            setattr(args, attr, value)
    return args


def _cmd_train(args) -> int:
    scenario = _load_scenario(args.scenario)
    config = TrainerConfig(
        variant=args.variant,
        outer_steps=args.steps,
        batch_size=args.batch,
        learning_rate=args.learning_rate,
        misreport_steps=args.misreport_steps,
        misreport_rate=args.misreport_rate,
        misreport_restarts=args.misreport_restarts,
        multiplier_rate=args.multiplier_rate,
        rho_regret=args.rho_regret,
        rho_envy=args.rho_envy,
        rho_business=args.rho_business,
        seed=args.seed,
        log_every=args.log_every,
    )
    result = train(scenario, config)
    save_mechanism(result.params, args.out)
    atomic_write_text(args.out + ".log", result.log_text())
    print(f"wrote weights to {args.out} and log to {args.out}.log")
    return 0


def _resolve_mechanism(spec: str, scenario: Scenario):
    if spec == "vcg":
        return "vcg"
    if not os.path.exists(spec):
        _fail(3, "config", f"weights file not found: {spec}")
    return load_mechanism(spec, expected=scenario.fingerprint())


def _cmd_evaluate(args) -> int:
    scenario = _load_scenario(args.scenario)
    mechanism = _resolve_mechanism(args.mechanism, scenario)
    report = evaluate(
        mechanism, scenario, samples=args.samples, seed=args.seed,
        regret_steps=args.regret_steps, regret_restarts=args.regret_restarts,
    )
    text = canonical_json(report.to_dict())
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_vcg(args) -> int:
    grid, reserve, schedules = _load_bid_file(args.bids)
    outcome = vcg_payments(schedules, grid, reserve)
    doc = {
        "allocation": [float(a) for a in outcome.allocation],
        "payments": [float(p) for p in outcome.payments],
    }
    sys.stdout.write(canonical_json(doc))
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        if not os.path.exists(path):
            _fail(3, "config", f"report not found: {path}")
        with open(path) as fh:
            reports.append(MetricsReport.from_dict(json.load(fh)))
    comparison = compare(reports)
    if args.out:
        atomic_write_text(args.out, canonical_json(comparison.to_dict()))
    if args.out_text:
        atomic_write_text(args.out_text, comparison.to_text())
    sys.stdout.write(comparison.to_text())
    return 0


def _cmd_run_auction(args) -> int:
    grid, reserve, schedules = _load_bid_file(args.bids)
    if not os.path.exists(args.mechanism):
        _fail(3, "config", f"weights file not found: {args.mechanism}")
    params = load_mechanism(args.mechanism)
    fp = params.fingerprint
    if (fp.total_units, fp.lot_count, fp.consumers) != \
            (grid.total_units, grid.lot_count, len(schedules)):
        _fail(3, "fingerprint-mismatch",
              f"weights expect m={fp.total_units}, k={fp.lot_count}, "
              f"n={fp.consumers}; bid file has m={grid.total_units}, "
              f"k={grid.lot_count}, n={len(schedules)}")
    if abs(fp.reserve_price - reserve) > 1e-12:
        _fail(3, "fingerprint-mismatch",
              f"weights expect reserve {fp.reserve_price}, bid file has {reserve}")
    mech = LearnedMechanism(params, [s.requirement for s in schedules])
    alloc, pay = mech.outcomes(encode_bids(schedules, reserve))
    caps = np.asarray([s.requirement for s in schedules], dtype=float)
    rounded = round_allocation(alloc[0], caps, int(round(alloc[0].sum())))
    doc = {
        "allocation": [int(a) for a in rounded],
        "allocation_fractional": [float(a) for a in alloc[0]],
        "payments": [float(p) for p in pay[0]],
    }
    sys.stdout.write(canonical_json(doc))
    return 0


def _cmd_convert_bid(args) -> int:
    spec = {}
    for part in args.flat.split(","):
        key, _, value = part.partition("=")
        spec[key.strip()] = float(value)
    try:
        flat = FlatDiscountBid(
            threshold=int(spec["threshold"]),
            price_below=spec["below"],
            price_at_or_above=spec["at"],
        )
        grid = make_lot_grid(int(spec["m"]), int(spec["k"]))
    except KeyError as exc:
        _fail(3, "config",
              f"--flat needs threshold=,below=,at=,m=,k= (missing {exc})")
    reserve = spec.get("reserve")
    conversion = convert_flat_to_lot(flat, grid, reserve_price=reserve)
    doc = {
        "prices": [float(p) for p in conversion.schedule.prices],
        "requirement": conversion.schedule.requirement,
        "boundary_exact": conversion.max_discrepancy <= 1e-9,
        "max_discrepancy": conversion.max_discrepancy,
        "worst_quantity": conversion.worst_quantity,
    }
    sys.stdout.write(canonical_json(doc))
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="volauction",
        description="Volume-discount forward auctions: VCG baseline and "
                    "learned mechanisms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    defaults_by_command: dict[str, dict] = {}

    def record(name, p):
        defaults_by_command[name] = {
            a.dest: a.default for a in p._actions if a.dest != "help"
        }

    p = sub.add_parser("train", help="train a mechanism variant")
    p.add_argument("--scenario", default=None, help="scenario file (default: built-in)")
    p.add_argument("--variant", required=True,
                   choices=["fc-optimal", "consumer-optimal", "nsw", "nsw-envy"])
    p.add_argument("--out", required=True, help="weights output path")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--misreport-steps", type=int, default=25)
    p.add_argument("--misreport-rate", type=float, default=0.1)
    p.add_argument("--misreport-restarts", type=int, default=1)
    p.add_argument("--multiplier-rate", type=float, default=0.01)
    p.add_argument("--rho-regret", type=float, default=1.0)
    p.add_argument("--rho-envy", type=float, default=1.0)
    p.add_argument("--rho-business", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_train)
    record("train", p)

    p = sub.add_parser("evaluate", help="Monte-Carlo metrics for a mechanism")
    p.add_argument("--mechanism", required=True, help="'vcg' or a weights file")
    p.add_argument("--scenario", default=None)
    p.add_argument("--samples", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regret-steps", type=int, default=200)
    p.add_argument("--regret-restarts", type=int, default=5)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_evaluate)
    record("evaluate", p)

    p = sub.add_parser("vcg", help="one-shot VCG outcome for a bid file")
    p.add_argument("--bids", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_vcg)
    record("vcg", p)

    p = sub.add_parser("compare", help="side-by-side table of saved reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", default=None, help="write JSON comparison here")
    p.add_argument("--out-text", default=None, help="write the text table here")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_compare)
    record("compare", p)

    p = sub.add_parser("run-auction", help="one-shot learned outcome for a bid file")
    p.add_argument("--mechanism", required=True, help="weights file")
    p.add_argument("--bids", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_run_auction)
    record("run-auction", p)

    p = sub.add_parser("convert-bid", help="convert a flat discount to lot prices")
    p.add_argument("--flat", required=True,
                   help="threshold=50,below=5.25,at=5.0,m=100,k=2[,reserve=3]")
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_convert_bid)
    record("convert-bid", p)

    return parser, defaults_by_command


def main(argv=None) -> int:
    parser, defaults_by_command = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config_file(args, defaults_by_command)
    try:
        return args.func(args)
    except BidValidationError as exc:
        _fail(2, exc.code, str(exc))
    except TrainingDivergedError as exc:
        _fail(4, exc.code, str(exc))
    except (ConfigError, FingerprintMismatchError) as exc:
        _fail(3, exc.code, str(exc))
    except AuctionError as exc:
        _fail(2, exc.code, str(exc))


if __name__ == "__main__":
    raise SystemExit(main())
