"""Command line: ``qmfg validate|run|sweep|auction``.

Exit codes: 0 success, 1 validation failure, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import stochastics as st
from .experiment import ExperimentConfig, check_config, convergence_sweep, run_experiment
from .market import AuctionRound, clearing_price, read_bids_csv
from .model import Scenario, StateGrid, validate_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    pass


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: invalid JSON ({exc})") from exc


def _load_config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_dict(_load_json(args.config))
        if args.output_dir:
            cfg.output_dir = Path(args.output_dir)
        if args.grid:
            lo, hi, cells = args.grid.split(",")
            cfg.scenario = cfg.scenario.with_(state_grid=StateGrid(float(lo), float(hi), int(cells)))
        check_config(cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"invalid config: {exc}") from exc
    return cfg


def cmd_validate(args) -> int:
    d = _load_json(args.scenario)
    try:
        scn = Scenario.from_dict(d.get("scenario", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationFailure(f"invalid scenario: {exc}") from exc
    rep = validate_scenario(scn)
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if rep.ok else EXIT_INVALID


def cmd_run(args) -> int:
    cfg = _load_config(args)
    rep = run_experiment(cfg)
    print(json.dumps({"output_dir": str(cfg.output_dir), "summary": rep.report["summary"]}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        n_list = [int(v) for v in args.n.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationFailure(f"--n expects comma-separated integers: {exc}") from exc
    if len(n_list) < 3:
        raise ValidationFailure("--n needs at least three particle counts")
    res = convergence_sweep(cfg, n_list)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.output_dir / "sweep.json", "w") as fh:
        json.dump(res.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_auction(args) -> int:
    try:
        rnd = AuctionRound(read_bids_csv(args.bids), args.nbar)
    except (KeyError, ValueError) as exc:
        raise ValidationFailure(str(exc)) from exc
    print(json.dumps(clearing_price(rnd).to_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmfg", description="Quantile-coupled mean-field simulations.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario JSON")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_validate)

    for name, fn, helptext in (("run", cmd_run, "run an experiment config"),
                               ("sweep", cmd_sweep, "particle-count convergence sweep")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config")
        s.add_argument("--output-dir", help="override the config's output_dir")
        s.add_argument("--grid", help="override the state grid as lo,hi,n_cells")
        if name == "sweep":
            s.add_argument("--n", default="1000,10000,100000", help="comma-separated particle counts")
        s.set_defaults(fn=fn)

    a = sub.add_parser("auction", help="clear one auction round from a CSV of bids")
    a.add_argument("bids")
    a.add_argument("--nbar", type=int, required=True)
    a.set_defaults(fn=cmd_auction)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    st.configure_threads()
    try:
        return args.fn(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001  (any failure during a run maps to exit 2)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
