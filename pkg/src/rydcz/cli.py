"""Command-line entry point.

Each subcommand writes delimited tables and a ``summary.json`` holding the
resolved config, its hash, the seed and the package version.  Exit codes:
0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from rydcz import __version__
from rydcz.atom import build_blockade_model, read_pulse_table, write_pulse_table
from rydcz.benchmark import (
    CountModel,
    NoiseEngineCZChannel,
    ParametricCZChannel,
    RBFitError,
    bias_ratio,
    detection_threshold_sweep,
    erasure_bias_experiment,
    run_single_qubit_rb,
    run_two_qubit_rb,
)
from rydcz.config import (
    PRESETS,
    ConfigError,
    _jsonable,
    channel_params,
    config_hash,
    gate_params,
    imaging_params,
    load_config,
    noise_config,
    optimizer_settings,
)
from rydcz.grape import optimize, refit_sweep
from rydcz.noise import error_budget
from rydcz.spam import DatasetError, bell_fidelity, fit_lifetime, read_bell_table, read_lifetime_table

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

# preset implied by ``rb MODE`` when neither --preset nor --config is given
MODE_PRESETS = {"single": "fig2e-defaults", "two": "fig4c-defaults", "bias": "fig4e-defaults", "threshold": "fig2g-defaults"}


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors, so they exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class NumericalFailure(RuntimeError):
    """A run finished but did not meet its numerical contract."""


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_summary(out, command, cfg, results):
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": __version__,
        "results": results,
    }
    text = json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"
    (out / "summary.json").write_text(text)
    return doc


def _load_pulse(cfg):
    path = cfg["pulse"]
    if not path:
        raise ConfigError("'pulse' is required: run 'rydcz optimize' first and pass --pulse PATH")
    try:
        return read_pulse_table(path)
    except FileNotFoundError:
        raise ConfigError(f"'pulse': file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"'pulse': {exc}") from None


# ----------------------------------------------------------------------------- commands


def cmd_optimize(cfg, out):
    params = gate_params(cfg)
    settings = optimizer_settings(cfg)
    model = build_blockade_model(params)
    result = optimize(params, cfg["optimizer"]["n_pieces"], cfg["seed"], settings, model)
    write_pulse_table(out / "pulse.csv", result.pulse)
    order = cfg["optimizer"]["chebyshev_order"]
    (n, cheb, infid), = refit_sweep(result.pulse, [order], model)
    _write_table(out / "chebyshev.csv", ("index", "coefficient_rad_per_s"), enumerate(cheb.coefficients))
    results = result.summary()
    results["chebyshev"] = {"n_max": n, "infidelity": infid}
    _write_summary(out, "optimize", cfg, results)
    if not result.converged:
        raise NumericalFailure(f"optimizer did not converge (best infidelity {result.infidelity:.3g})")
    return results


def cmd_error_budget(cfg, out):
    pulse = _load_pulse(cfg)
    model = build_blockade_model(gate_params(cfg))
    config = noise_config(cfg)
    sources = tuple(cfg["noise"]["sources"])
    try:
        report = error_budget(pulse, model, config, sources)
    except ValueError as exc:
        raise ConfigError(f"'noise.sources': {exc}") from None
    rows = [(k, e, s) for k, (e, s) in report.per_source.items()]
    _write_table(out / "error_budget.csv", ("source", "error", "stderr"), rows)
    results = report.summary()
    _write_summary(out, "error-budget", cfg, results)
    return results


def _cz_channel(cfg, gates):
    kind = cfg["rb"]["channel"]
    if kind == "ideal":
        return ParametricCZChannel()
    if kind != "noise-engine":
        raise ConfigError("'rb.channel' must be 'noise-engine' or 'ideal'")
    pulse = _load_pulse(cfg)
    model = build_blockade_model(gate_params(cfg))
    return NoiseEngineCZChannel.from_pulse(
        pulse, model, noise_config(cfg), tuple(cfg["noise"]["sources"]), cfg["rb"]["pool_sequences"], max(gates)
    )


def _rb_curves(out, result):
    _write_table(
        out / "rb_curves.csv",
        ("length", "success", "stderr", "success_conditioned", "stderr_conditioned"),
        result.curve_table(),
    )


def cmd_rb(cfg, out):
    r = cfg["rb"]
    mode = r["mode"]
    if mode == "single":
        result = run_single_qubit_rb(channel_params(cfg), r["lengths"], r["erasure_period"], cfg["shots"], cfg["seed"])
        _rb_curves(out, result)
        results = result.summary()
    elif mode == "two":
        result = run_two_qubit_rb(
            _cz_channel(cfg, r["lengths"]), r["lengths"], r["erasure_period"], cfg["shots"], cfg["seed"], r["rotations"], imaging_params(cfg)
        )
        _rb_curves(out, result)
        results = result.summary()
    elif mode == "bias":
        channel = _cz_channel(cfg, r["bias_gates"])
        fits = {}
        rows = []
        for i, init in enumerate(("00", "++", "11")):
            b = erasure_bias_experiment(channel, init, r["bias_gates"], cfg["shots"], cfg["seed"] + i, imaging_params(cfg))
            fits[init] = b
            rows += [(init, n, p, s) for n, p, s in b.table()]
        _write_table(out / "bias.csv", ("initial", "n_gates", "detection", "stderr"), rows)
        ratio, lower, bound_only = bias_ratio(fits["11"], fits["00"])
        results = {
            init: {"slope": b.slope, "slope_err": b.slope_err, "intercept": b.intercept, "intercept_err": b.intercept_err}
            for init, b in fits.items()
        }
        results["ratio_11_00"] = ratio
        results["ratio_lower_bound"] = lower
        results["ratio_is_bound_only"] = bound_only
    elif mode == "threshold":
        c = r["counts"]
        img = r["imaging"]
        counts = CountModel.calibrated(img["fidelity"], img["false_positive"], c["threshold"], c["background_mean"], c["bright_sigma"])
        sweep = detection_threshold_sweep(
            counts, channel_params(cfg), cfg["shots"], r["thresholds"], cfg["seed"], r["lengths"], r["erasure_period"]
        )
        rows = zip(sweep.thresholds, sweep.p_err_given_det, sweep.conversion, sweep.plateau)
        _write_table(out / "threshold.csv", ("threshold", "p_err_given_det", "conversion", "plateau"), rows)
        results = {"plateau_exists": sweep.plateau_exists, "max_conversion": float(np.nanmax(sweep.conversion))}
        if sweep.plateau_exists:
            t = sweep.thresholds[sweep.plateau]
            results["plateau_range"] = [float(t.min()), float(t.max())]
    else:
        raise ConfigError("'rb.mode' must be one of single, two, bias, threshold")
    _write_summary(out, f"rb-{mode}", cfg, results)
    return results


def cmd_analyze(cfg, out):
    kind = cfg["analyze"]["kind"]
    path = cfg["analyze"]["dataset"]
    if not path:
        raise ConfigError("'analyze.dataset' is required")
    try:
        if kind == "bell":
            results = bell_fidelity(read_bell_table(path)).summary()
        elif kind == "lifetime":
            power, rate, err = read_lifetime_table(path)
            fit = fit_lifetime(power, rate, err if np.all(err > 0) else None)
            results = fit.summary()
        else:
            raise ConfigError("'analyze.kind' must be 'bell' or 'lifetime'")
    except FileNotFoundError:
        raise ConfigError(f"'analyze.dataset': file not found: {path}") from None
    _write_summary(out, f"analyze-{kind}", cfg, results)
    return results


COMMANDS = {"optimize": cmd_optimize, "error-budget": cmd_error_budget, "rb": cmd_rb, "analyze": cmd_analyze}


# ----------------------------------------------------------------------------- parsing


def build_parser():
    parser = _Parser(prog="rydcz", description="Rydberg CZ synthesis, noise budgets and erasure benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--preset", metavar="NAME", help=f"parameter preset ({', '.join(sorted(PRESETS))})")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--shots", type=int, help="Monte Carlo shots or sequences per point")
    common.add_argument("--out", metavar="DIR", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", parents=[common], help="synthesize the CZ pulse")
    p.add_argument("--restarts", type=int)
    p.add_argument("--n-jobs", type=int)

    p = sub.add_parser("error-budget", parents=[common], help="per-source gate error table")
    p.add_argument("--pulse", metavar="PATH", help="pulse table from 'optimize'")

    p = sub.add_parser("rb", parents=[common], help="randomized benchmarking with erasure detection")
    p.add_argument("mode", nargs="?", choices=("single", "two", "bias", "threshold"))
    p.add_argument("--pulse", metavar="PATH")
    p.add_argument("--channel", choices=("noise-engine", "ideal"))

    p = sub.add_parser("analyze", parents=[common], help="Bell-state or lifetime analysis")
    p.add_argument("kind", nargs="?", choices=("bell", "lifetime"))
    p.add_argument("dataset", nargs="?", metavar="PATH")
    return parser


def _overrides(args):
    over = {"seed": args.seed, "shots": args.shots, "out": args.out}
    if getattr(args, "pulse", None):
        over["pulse"] = args.pulse
    if args.command == "optimize":
        over["optimizer"] = {k: v for k, v in (("restarts", args.restarts), ("n_jobs", args.n_jobs)) if v is not None}
    elif args.command == "rb":
        over["rb"] = {k: v for k, v in (("mode", args.mode), ("channel", args.channel)) if v is not None}
    elif args.command == "analyze":
        over["analyze"] = {k: v for k, v in (("kind", args.kind), ("dataset", args.dataset)) if v is not None}
    return over


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        preset = args.preset
        if preset is None and args.config is None and args.command == "rb" and args.mode:
            preset = MODE_PRESETS[args.mode]
        cfg = load_config(args.config, preset, _overrides(args))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        results = COMMANDS[args.command](cfg, out)
    except (ConfigError, DatasetError) as exc:
        print(f"rydcz: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, RBFitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"rydcz: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        print(f"rydcz: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(_jsonable(results), sort_keys=True, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
