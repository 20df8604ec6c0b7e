"""Command-line interface: ``odin <command> [options]``.

Exit codes: 0 success, 2 invalid arguments, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from odin.dataset import read_csv, write_csv
from odin.errors import OdinError
from odin.experiments import (
    NoiseSpec,
    canonical_dataset,
    config_hash,
    run_model_selection,
    run_parameter_inference,
    run_scaling,
    run_state_inference,
    write_json,
)
from odin.ode_models import get_system, system_names
from odin.odin_core import OdinConfig, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


def _add_noise(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--noise-std", type=float, help="absolute observation noise std")
    g.add_argument("--snr", type=float, help="signal-to-noise ratio per state")


def _noise(args, default=None):
    if args.noise_std is not None:
        return NoiseSpec("sigma", args.noise_std)
    if getattr(args, "snr", None) is not None:
        return NoiseSpec("snr", args.snr)
    if default is not None:
        return default
    raise UsageError("one of --noise-std or --snr is required")


def _system(name):
    try:
        return get_system(name)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from None


def _config(args):
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    if getattr(args, "seed", None) is not None and "seed" not in cfg:
        cfg["seed"] = args.seed
    try:
        return OdinConfig.from_dict(cfg)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad config: {err}") from None


def _dims(text):
    try:
        dims = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dimension list {text!r}") from None
    if not dims or min(dims) < 4:
        raise argparse.ArgumentTypeError("dimensions must be integers >= 4")
    return dims


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odin", description="ODE-informed regression: simulate data, fit models, run studies."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a noisy dataset CSV for a benchmark system")
    p.add_argument("--system", required=True, choices=system_names())
    _add_noise(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit a dataset CSV and write a result JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--system", required=True, choices=system_names())
    p.add_argument("--config", help="JSON file with OdinConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    for name, helptext in (("infer-params", "parameter-inference study"),
                           ("state-infer", "state-inference study")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--system", required=True, choices=system_names())
        _add_noise(p)
        p.add_argument("--reps", type=int, default=20)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", required=True)
        if name == "infer-params":
            p.add_argument("--conventional-rmse", action="store_true",
                           help="divide trajectory errors by sqrt(N) instead of N")

    p = sub.add_parser("model-select", help="Lotka-Volterra misspecification study")
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("scaling", help="Lorenz '96 runtime versus dimension")
    p.add_argument("--dims", type=_dims, default=[25, 50, 100, 200])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    return parser


def _positive_reps(args):
    if getattr(args, "reps", 1) < 1:
        raise UsageError("--reps must be >= 1")


def cmd_simulate(args):
    system = _system(args.system)
    data = canonical_dataset(system, _noise(args), args.seed)
    write_csv(data, args.out)


def cmd_fit(args):
    system = _system(args.system)
    config = _config(args)
    data = read_csv(args.data)
    if data.K != system.K:
        raise UsageError(f"{args.data} has {data.K} states, {args.system} needs {system.K}")
    result = fit(data, system, config)
    payload = result.to_dict()
    payload["manifest"] = {
        "system": args.system,
        "data": str(args.data),
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "optimizer_reason": result.report.reason,
        "optimizer_iterations": result.report.n_iter,
    }
    write_json(args.out, payload)


def cmd_infer(args):
    _positive_reps(args)
    _system(args.system)
    kwargs = dict(reps=args.reps, config=_config(args), out=args.out,
                  master_seed=args.seed, workers=args.workers)
    if args.command == "infer-params":
        run_parameter_inference(args.system, _noise(args),
                                conventional=args.conventional_rmse, **kwargs)
    else:
        run_state_inference(args.system, _noise(args), **kwargs)


def cmd_model_select(args):
    _positive_reps(args)
    run_model_selection(NoiseSpec("sigma", args.noise_std), reps=args.reps,
                        config=_config(args), out=args.out, master_seed=args.seed,
                        workers=args.workers)


def cmd_scaling(args):
    _positive_reps(args)
    run_scaling(args.dims, reps=args.reps, config=_config(args), out=args.out,
                master_seed=args.seed)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "infer-params": cmd_infer,
    "state-infer": cmd_infer,
    "model-select": cmd_model_select,
    "scaling": cmd_scaling,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as err:
        print(f"odin: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"odin: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (OdinError, ArithmeticError, np.linalg.LinAlgError) as err:
        stage = getattr(err, "stage", None)
        print(f"odin: numerical failure{f' in {stage}' if stage else ''}: {err}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as err:
        stage = getattr(err, "stage", None)
        if stage is not None:
            print(f"odin: numerical failure in {stage}: {err}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"odin: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
