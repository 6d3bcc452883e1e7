import sys
import os
import argparse
import csv
import json
import logging
from dataclasses import replace

import numpy as np

from config import KALGRAD_VERSION, setup_logging
from diagnostics import (
    coercivity_probe,
    concentration_sweep,
    epsilon_vector_form,
    gradient_dominance_constant,
    power_bound_check,
    truncation_bound_curve,
    truncation_decay,
)
from errors import ConfigError, DiagnosticFailure, InconclusiveError, KalgradError
from experiment_config import load_config
from filtering import steady_state_gain
from learner import LandscapeConstants, gd_run, sample_requirements
from objective import duality_check
from run_experiment import oracle_summary, run_experiment, run_learn, start_gain, write_json
from system_model import derive_seed, simulate

logger = logging.getLogger("kalgrad.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_USAGE = 64

# ANSI color codes
R  = "\033[0m"
BOLD = "\033[1m"
DIM  = "\033[2m"
RED  = "\033[38;2;255;85;85m"
AMBER= "\033[38;2;255;189;46m"
BLUE = "\033[38;2;88;166;255m"
CYAN = "\033[38;2;79;212;190m"
GRAY = "\033[38;2;110;118;129m"
WHITE= "\033[38;2;230;237;243m"
BG_DARK = "\033[48;2;13;17;23m"

W = 64

# ==========================================
# 🛠️ HELPER FUNCTIONS
# ==========================================

class _Console:
    """Human-facing lines go to stderr so stdout stays machine readable."""

    def __init__(self, quiet=False):
        self.quiet = quiet

    def __call__(self, text=""):
        if not self.quiet:
            print(text, file=sys.stderr)

    def banner(self, title, subtitle=None):
        self()
        self(f"{BG_DARK}{CYAN}{BOLD}  ◈ {title}  {R}")
        self(f"{GRAY}  {'─' * W}{R}")
        if subtitle:
            self(f"  {WHITE}{BOLD}Config:{R}  {AMBER}{BOLD}{subtitle}{R}")
            self(f"{GRAY}  {'─' * W}{R}")

    def item(self, label, value):
        self(f"  {BLUE}▸{R} {WHITE}{BOLD}{label:<26}{R} {GRAY}{value}{R}")

    def ok(self, text):
        self(f"  {CYAN}✓{R}  {text}")

    def warn(self, text):
        self(f"  {AMBER}!{R}  {text}")

    def fail(self, text):
        self(f"  {RED}✗{R}  {text}")

    def footer(self, text):
        self(f"\n{GRAY}  {'─' * W}{R}")
        self(f"  {DIM}{text}{R}\n")


def _fmt(value):
    return np.array2string(np.asarray(value), precision=6, separator=", ")


def _emit(payload, fmt):
    """JSON object, or flat key,value rows, on stdout."""
    if fmt == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerow(["key", "value"])
        for key in sorted(payload):
            writer.writerow([key, json.dumps(payload[key])])
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


def _load(args):
    cfg = load_config(args.config)
    record_timing = False if getattr(args, "deterministic", False) else None
    cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out, record_timing=record_timing)
    fmt = getattr(args, "format", None)
    if fmt and args.command in ("learn", "run", "diagnose"):
        cfg = replace(cfg, output=replace(cfg.output, formats=(fmt,)))
    return cfg


# ==========================================
# 🎯 COMMANDS
# ==========================================

def cmd_oracle(args, say):
    cfg = _load(args)
    say.banner("STEADY-STATE ORACLE", cfg.source)
    payload = oracle_summary(cfg.model)
    say.item("L*", _fmt(payload["L_star"]))
    say.item("rho(A - L* H)", f"{payload['rho']:.6f}")
    say.item("J(L*)", f"{payload['J_star']:.10g}")
    _emit(payload, args.format or "json")
    return EXIT_OK


def cmd_duality(args, say):
    cfg = _load(args)
    gain, _ = steady_state_gain(cfg.model)
    T = args.horizon or cfg.diagnostics.duality_horizon
    samples = args.samples or cfg.diagnostics.duality_samples
    seed = cfg.diagnostics.seed if args.seed is None else args.seed
    say.banner("DUALITY CHECK", cfg.source)
    say.item("horizon / samples", f"T = {T}, M = {samples}")

    report = duality_check(cfg.model, gain, T, samples, seed, noise=cfg.noise,
                           workers=cfg.sgd.workers)
    say.item("Monte-Carlo lhs", f"{report.lhs:.8g} ± {report.stderr:.2g}")
    say.item("adjoint-cost rhs", f"{report.rhs:.8g}")
    if report.within(4.0):
        say.ok(f"agreement within {report.z_score:.2f} standard errors")
    else:
        say.warn(f"lhs and rhs differ by {report.z_score:.2f} standard errors")
    _emit(report.to_dict(), args.format or "json")
    return EXIT_OK


def cmd_learn(args, say):
    cfg = _load(args)
    method = args.method or cfg.method
    say.banner(f"LEARN ({method.upper()})", cfg.source)
    record, paths = run_learn(cfg, method)

    say.item("iterations", len(record) - 1)
    say.item("final gain", _fmt(record.final.L))
    say.item("final rho", f"{record.final.rho:.6f}")
    say.item("normalized gap", f"{record.normalized_gaps[-1]:.4e}")
    if record.safeguard_events:
        say.warn(f"{len(record.safeguard_events)} rejected steps")
    for path in paths:
        say.ok(f"wrote {path}")
    say.footer(f"seed {cfg.sgd.seed}  │  config {cfg.config_hash[:12]}")
    return EXIT_OK


def cmd_run(args, say):
    cfg = _load(args)
    say.banner("EXPERIMENT SWEEP", cfg.source)
    say.item("batch sizes", list(cfg.sweep.batch_sizes))
    say.item("horizons", list(cfg.sweep.horizons))
    say.item("seeds", f"{len(cfg.sweep.seeds)} ({cfg.sweep.seeds[0]}..{cfg.sweep.seeds[-1]})")

    result = run_experiment(cfg, workers=args.workers)
    for cell in result.cells:
        final = np.mean([curve[-1] for curve in cell.normalized_gaps])
        say(f"  {CYAN}◉{R} M={cell.batch_size:<5} T={cell.horizon:<5} "
            f"{GRAY}final normalized gap{R} {WHITE}{final:.4e}{R}")
    say.ok(f"metadata {result.metadata_path}")
    say.footer(f"{len(result.cells)} cells  │  config {cfg.config_hash[:12]}")
    return EXIT_OK


def cmd_simulate(args, say):
    cfg = _load(args)
    T = args.horizon or cfg.sgd.horizon
    seed = cfg.sgd.seed if args.seed is None else args.seed
    traj = simulate(cfg.model, cfg.noise, T, derive_seed(seed, 0))
    path = os.path.join(cfg.output.directory, f"trajectory_seed{seed}.csv")
    os.makedirs(cfg.output.directory, exist_ok=True)
    traj.to_csv(path)
    say.banner("SIMULATE", cfg.source)
    say.ok(f"wrote {T + 1} samples to {path}")
    return EXIT_OK


def _curve_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def cmd_diagnose(args, say):
    cfg = _load(args)
    d = cfg.diagnostics
    model, noise = cfg.model, cfg.noise
    checks = args.checks.split(",") if args.checks else list(d.checks)
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    kappas = (noise.kappa_xi, noise.kappa_omega)

    L0 = start_gain(cfg)
    gain_star, _ = steady_state_gain(model)
    say.banner("DIAGNOSTICS", cfg.source)

    report, failed = {"version": KALGRAD_VERSION, "config_hash": cfg.config_hash}, False
    for check in checks:
        try:
            if check == "epsilon":
                worst = 0.0
                for i in range(10):
                    traj = simulate(model, noise, cfg.sgd.horizon, derive_seed(d.seed, 1, i))
                    worst = max(worst, epsilon_vector_form(model.A, model.H, L0, traj).discrepancy)
                report[check] = {"status": "pass", "max_discrepancy": worst}

            elif check == "truncation":
                rep = truncation_decay(model, L0, d.horizons)
                bounds = truncation_bound_curve(model, L0, d.horizons, kappas)
                report[check] = {"status": "pass", **rep.to_dict(), "bound": bounds}
                if "csv" in cfg.output.formats:
                    _curve_csv(os.path.join(out, "truncation.csv"), ["T", "gap", "bound"],
                               [[T, repr(e), repr(b)] for T, e, b in zip(rep.xs, rep.errors, bounds)])

            elif check == "concentration":
                rep = concentration_sweep(model, noise, L0, cfg.sgd.horizon, d.batch_sizes,
                                          reps=d.reps, seed=d.seed, workers=cfg.sgd.workers)
                report[check] = {"status": "pass", **rep.to_dict()}
                if "csv" in cfg.output.formats:
                    _curve_csv(os.path.join(out, "concentration.csv"), ["M", "deviation"],
                               [[M, repr(e)] for M, e in zip(rep.xs, rep.errors)])

            elif check == "power_bound":
                entries = {}
                for name, gain in (("L0", L0), ("L_star", gain_star)):
                    rep = power_bound_check(gain, d.k_max)
                    entries[name] = {"C_L": rep.c_value, "radius": rep.radius,
                                     "worst_ratio": rep.worst_ratio, "worst_k": rep.worst_k}
                report[check] = {"status": "pass", **entries}

            elif check == "duality":
                rep = duality_check(model, gain_star, d.duality_horizon, d.duality_samples,
                                    d.seed, noise=noise, workers=cfg.sgd.workers)
                status = "pass" if rep.within(4.0) else "fail"
                failed |= status == "fail"
                report[check] = {"status": status, **rep.to_dict()}

            elif check == "landscape":
                path = gd_run(model, L0, tol=cfg.tol, max_iters=cfg.sgd.max_iters * 20)
                c_fit, _ = gradient_dominance_constant(model, path.iterates)
                probe = coercivity_probe(model, L0)
                consts = LandscapeConstants.from_gains(model.A, model.H, [L0, gain_star])
                needs = sample_requirements(consts, model.H, kappas, s=0.5, s0=1.0, tau=0.5,
                                            delta=0.05, n=model.n, m=model.m, refined=True)
                report[check] = {
                    "status": "pass",
                    "gradient_dominance_c": c_fit,
                    "gd_iterations": len(path) - 1,
                    "coercivity_max_cost": max(probe.costs),
                    "boundary_scale": probe.boundary_scale,
                    "T_min": needs.T_min,
                    "M_min": needs.M_min,
                    "M_refined": needs.M_refined,
                }
            else:
                raise ConfigError(f"unknown check {check!r}")

        except InconclusiveError as exc:
            report[check] = {"status": "inconclusive", "message": str(exc)}
            say.warn(f"{check}: {exc}")
            continue
        except DiagnosticFailure as exc:
            report[check] = {"status": "fail", "message": str(exc)}
            failed = True
            say.fail(f"{check}: {exc}")
            continue
        except ConfigError:
            raise
        except KalgradError as exc:
            # a numerical failure inside one check fails that check only
            report[check] = {"status": "fail", "message": f"{type(exc).__name__}: {exc}"}
            failed = True
            say.fail(f"{check}: {exc}")
            continue

        if report[check]["status"] == "pass":
            say.ok(check)
        else:
            say.fail(check)

    if "json" in cfg.output.formats:
        say.ok(f"wrote {write_json(os.path.join(out, 'diagnostics.json'), report)}")
    say.footer(f"{len(checks)} checks  │  config {cfg.config_hash[:12]}")
    return EXIT_NUMERICAL if failed else EXIT_OK


# ==========================================
# 🚪 ENTRY POINT
# ==========================================

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="kalgrad", description="Learn the steady-state Kalman gain by SGD.")
    parser.add_argument("--version", action="version", version=f"kalgrad {KALGRAD_VERSION}")
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="YAML config file or preset name")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", default=None, help="output directory")
        sub.add_argument("--format", choices=("csv", "json"), default=None)
        sub.add_argument("--quiet", action="store_true")
        sub.set_defaults(func=func)
        return sub

    add("oracle", cmd_oracle, "DARE gain, covariance and optimal cost")
    learn = add("learn", cmd_learn, "one SGD or GD run")
    learn.add_argument("--method", choices=("sgd", "gd"), default=None)
    learn.add_argument("--deterministic", action="store_true", help="write wall_ms as 0")
    run = add("run", cmd_run, "full (M, T, seed) sweep")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--deterministic", action="store_true", help="write wall_ms as 0")
    diag = add("diagnose", cmd_diagnose, "identity, decay and bound checks")
    diag.add_argument("--checks", default=None, help="comma separated subset")
    dual = add("duality-check", cmd_duality, "Monte-Carlo vs adjoint-cost duality")
    dual.add_argument("--samples", type=int, default=None)
    dual.add_argument("--horizon", type=int, default=None)
    sim = add("simulate", cmd_simulate, "export one trajectory as CSV")
    sim.add_argument("--horizon", type=int, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    setup_logging("WARNING" if args.quiet else None)
    logger.debug("kalgrad %s: %s", KALGRAD_VERSION, args.command)
    say = _Console(args.quiet)
    try:
        return args.func(args, say)
    except ConfigError as e:
        say.fail(f"Config error: {e}")
        if args.quiet:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KalgradError as e:
        say.fail(f"{type(e).__name__}: {e}")
        if args.quiet:
            print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        say.fail(f"I/O error: {e}")
        return EXIT_NUMERICAL


if __name__ == '__main__':
    sys.exit(main())
