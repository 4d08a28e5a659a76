"""Command-line front end for the simulate / filter / search workflow.

Subcommands: simulate, filter, search, refine, eval, spatreg-sweep.  Models
are the measles submodels A, B, C (covariates from a directory or the
built-in synthetic set via --covars demo:<n_units>) or a finite-HMM
fixture loaded from JSON.  Errors exit nonzero with a JSON category on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, measles, oracle
from .core import PanelData, TimeGrid
from .filtering import FilterError
from .params import collapse, load_params, make_block_partition
from .search import IbpfConfig, build_sigma_schedule

WEEK = 7.0 / 365.25
DEFAULT_T0 = 1950.0


class CliError(Exception):
    category = "usage"


class DataError(CliError):
    category = "data"


def _load_covariates(spec: str) -> measles.MeaslesCovariates:
    if spec.startswith("demo:"):
        return measles.demo_covariates(int(spec.split(":")[1]))
    path = Path(spec)
    if not path.is_dir():
        raise DataError(f"covariate directory {spec!r} not found")
    return measles.load_covariates(path)


def _build_model(args):
    """(layout, model, units) from --model/--covars."""
    tag = args.model.upper()
    if tag == "HMM-FIXTURE":
        if not args.params:
            raise CliError("--params with an HMM fixture document is required")
        hmm = oracle.FiniteSpatHMM.from_json(Path(args.params).read_text())
        layout = None
        model = oracle.HmmModel(hmm)
        units = tuple(f"unit{u}" for u in range(hmm.n_units))
        return layout, model, units
    if tag not in ("A", "B", "C"):
        raise CliError(f"unknown model {args.model!r}")
    if not args.covars:
        raise CliError("--covars is required for measles models")
    cov = _load_covariates(args.covars)
    layout, model = measles.build_submodel(tag, cov, t0=args.t0)
    return layout, model, cov.units


def _load_theta(args, layout):
    if not args.params:
        raise CliError("--params is required")
    pm = load_params(args.params)
    if layout is not None and pm.layout.names != layout.names:
        raise DataError("parameter document entries do not match the model layout")
    return collapse(pm)


def _load_data(args, units) -> PanelData:
    if not args.data:
        raise CliError("--data is required")
    return PanelData.load_csv(args.data, t0=args.t0, period=WEEK, units=units)


def _config(args, layout, n_obs) -> IbpfConfig:
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    sigma = cfg.get("sigma", 0.005)
    config = IbpfConfig(
        n_particles=int(cfg.get("n_particles", args.particles or 4000)),
        n_iterations=int(cfg.get("n_iterations", 100)),
        sigma=sigma,
        cooling_rate=float(cfg.get("cooling_rate", 0.5)),
        spat_reg=float(cfg.get("spat_reg", 0.1)),
    )
    if "block_size" in cfg and layout is not None:
        config.blocks = make_block_partition(layout.n_units, int(cfg["block_size"]))
    if cfg.get("sigma_overrides") and layout is not None:
        config.sigma = build_sigma_schedule(
            layout, float(sigma), n_obs, overrides=cfg["sigma_overrides"]
        )
    return config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="A", help="A, B, C, or hmm-fixture")
    p.add_argument("--data", help="case CSV (week_index,unit,cases; NA = missing)")
    p.add_argument("--covars", help="covariate directory or demo:<n_units>")
    p.add_argument("--params", help="parameter document (JSON)")
    p.add_argument("--config", help="search configuration document (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--t0", type=float, default=DEFAULT_T0)


def _cmd_simulate(args) -> int:
    layout, model, units = _build_model(args)
    if layout is None:
        raise CliError("simulate requires a measles model")
    theta = _load_theta(args, layout) if args.params else measles.theta_from_dict(
        layout, measles.SIM_TRUTH
    )
    grid = TimeGrid.weekly(args.t0, args.n_weeks)
    harness.cmd_simulate(model, layout, theta, grid, args.seed, args.out, units=units)
    if args.covars and args.covars.startswith("demo:"):
        measles.save_covariates(Path(args.out) / "covariates", model.covariates)
    print(f"wrote {args.out}/cases.csv ({len(units)} units x {args.n_weeks} weeks)")
    return 0


def _cmd_filter(args) -> int:
    layout, model, units = _build_model(args)
    if layout is None:
        hmm = model.hmm
        data = np.loadtxt(args.data, delimiter=",")
        result = oracle.exact_loglik(hmm, np.atleast_2d(data))
        print(json.dumps({"exact_loglik": result}))
        return 0
    theta = _load_theta(args, layout)
    data = _load_data(args, units)
    result = harness.cmd_filter(
        model, data, theta, layout, args.particles or 4000, args.seed, args.out
    )
    print(json.dumps({"loglik": result.loglik, "failures": len(result.failures)}))
    return 0


def _cmd_eval(args) -> int:
    layout, model, units = _build_model(args)
    theta = _load_theta(args, layout)
    data = _load_data(args, units)
    res = harness.cmd_eval(
        model, data, theta, layout, args.particles or 8000, args.replicates,
        seed=args.seed,
    )
    print(json.dumps({"loglik": res.loglik, "se": res.se,
                      "replicates": res.replicates.tolist()}))
    return 0


def _cmd_search(args) -> int:
    layout, model, units = _build_model(args)
    theta = _load_theta(args, layout)
    data = _load_data(args, units)
    config = _config(args, layout, data.n_obs)
    round_ = harness.cmd_search(
        model, data, layout, config,
        theta0=theta, n_replicates=args.replicates, seed=args.seed,
        out_dir=args.out, jitter=args.jitter, workers=args.threads,
    )
    best = round_.best()
    print(json.dumps({"best_loglik": best.eval_loglik, "best_se": best.eval_se,
                      "completed": len(round_.completed())}))
    return 0


def _cmd_refine(args) -> int:
    layout, model, units = _build_model(args)
    data = _load_data(args, units)
    config = _config(args, layout, data.n_obs)
    previous = harness.SearchRound.load(args.previous)
    round_ = harness.cmd_refine(
        previous, model, data, layout, config,
        q=args.top, k=args.copies, seed=args.seed, out_dir=args.out,
        workers=args.threads,
    )
    best = round_.best()
    print(json.dumps({"best_loglik": best.eval_loglik,
                      "completed": len(round_.completed())}))
    return 0


def _cmd_spatreg_sweep(args) -> int:
    layout, model, units = _build_model(args)
    theta = _load_theta(args, layout)
    data = _load_data(args, units)
    config = _config(args, layout, data.n_obs)
    values = [float(v) for v in args.values.split(",")]
    frame = harness.spatreg_sweep(
        model, data, layout, config, theta, values, args.replicates,
        seed=args.seed, out_dir=args.out,
    )
    print(frame.groupby("spat_reg")["loglik"].median().to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockpf",
        description="Block particle filtering workflows for coupled-unit models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a case panel")
    _add_common(p)
    p.add_argument("--n-weeks", type=int, default=104)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("filter", help="one filter run at fixed parameters")
    _add_common(p)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("eval", help="replicated likelihood evaluation")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("search", help="replicated iterated-filter searches")
    _add_common(p)
    p.add_argument("--jitter", type=float, default=0.1)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("refine", help="restart from the top of a previous round")
    _add_common(p)
    p.add_argument("--previous", required=True, help="round.json of the parent round")
    p.add_argument("--top", type=float, default=0.25)
    p.add_argument("--copies", type=int, default=4)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("spatreg-sweep", help="sensitivity grid over spat_reg")
    _add_common(p)
    p.add_argument("--values", default="0.0,0.05,0.1,0.2,0.5")
    p.set_defaults(func=_cmd_spatreg_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 3
    except FilterError as exc:
        print(json.dumps({"error": "numeric", "message": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
