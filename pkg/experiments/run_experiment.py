#!/usr/bin/env python3
"""
Experiment Runner
Command-line entry point: simulate the flow, solve the skeleton, estimate
rate functions and run the large deviation and regularity checks.

Usage:
    python3 experiments/run_experiment.py simulate --config configs/constant.json --out runs/sim
    python3 experiments/run_experiment.py ldp1 --config configs/ldp1_linear.json --out runs/ldp1 --strict
"""

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import Callable, Dict, Optional, Tuple

import numpy as np

# Add simulation and optimization directories to path
root_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
for sub in ('simulation', 'optimization'):
    sub_path = os.path.join(root_path, sub)
    if sub_path not in sys.path:
        sys.path.insert(0, sub_path)

from config import COMMANDS, VERSION, ConfigError, RunConfig, load_config, resolve_config
from errors import SimulationError
from flow import (FlowTrajectory, Scheme, save_trajectory_binary, save_trajectory_csv,
                  solve_sde, solve_skeleton)
from ldp import (SCHEMA_VERSION, EventSpec, EventTarget, LdpReport, SweepConfig,
                 flow_lipschitz_check, ldp1_sweep, ldp2_sweep, moment_bounds_check,
                 oscillation_family, scaling_check)
from measure import pushforward, second_moment, wasserstein2
from noise import sample_noise
from rate_function import constant_control_scan, minimize_rate
from weakform import (TestFunction, default_cutoff_radius, quadratic_variation_check,
                      terminal_residuals, weak_residual, weak_residual_refinement)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CHECK_FAILED = 3

ORACLE_RTOL = 1e-2
REFINEMENT_BAND = 0.2
Z_LIMIT = 3.0

Results = Tuple[Dict, Dict[str, bool]]


def print_separator():
    """Print a visual separator"""
    print("\n" + "=" * 80 + "\n")


def to_jsonable(value):
    """Plain JSON types; non-finite floats become null"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def write_json(data: Dict, path: str):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(data), f, indent=2)


def provenance(cfg: RunConfig) -> Dict:
    return {
        "version": VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }


# -- shared outputs -----------------------------------------------------------------

def save_measures_csv(traj: FlowTrajectory, path: str):
    """Per-node summary of the measure path: mean, second moment, W2 to mu_0"""
    d = traj.initial.dim
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "time"] + [f"mean_{k + 1}" for k in range(d)]
                        + ["second_moment", "w2_to_initial"])
        for j, t in enumerate(traj.grid.nodes):
            mu = pushforward(traj.initial, traj.particle_states[j])
            row = [j, repr(float(t))] + [repr(float(v)) for v in mu.mean()]
            row += [repr(second_moment(mu)), repr(wasserstein2(mu, traj.initial))]
            writer.writerow(row)


def save_flow(traj: FlowTrajectory, out_dir: str, binary: bool):
    save_trajectory_csv(traj, os.path.join(out_dir, "trajectory.csv"))
    save_measures_csv(traj, os.path.join(out_dir, "measures.csv"))
    if binary:
        save_trajectory_binary(traj, os.path.join(out_dir, "trajectory.bin"))


def flow_summary(traj: FlowTrajectory) -> Dict:
    terminal = pushforward(traj.initial, traj.particle_states[-1])
    return {
        "particles": traj.n,
        "eval_points": int(traj.eval_points.shape[0]),
        "steps": traj.grid.steps,
        "terminal_mean": terminal.mean(),
        "terminal_second_moment": second_moment(terminal),
        "max_abs_state": float(np.max(np.abs(traj.states))) if traj.states.size else 0.0,
        "provenance": traj.provenance(),
    }


# -- commands -----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> Results:
    noise = sample_noise(cfg.grid, cfg.field.modes, cfg.seed)
    traj = solve_sde(cfg.field, cfg.initial, noise, cfg.epsilon, cfg.grid, cfg.eval_points)
    save_flow(traj, args.out, args.binary)
    noise.save_csv(os.path.join(args.out, "noise.csv"))
    print(f"✓ Simulated {traj.n} particles over {cfg.grid.steps} steps (eps = {cfg.epsilon})")
    return flow_summary(traj), {}


def cmd_skeleton(cfg: RunConfig, args) -> Results:
    control = cfg.control()
    scheme = Scheme(cfg.block("skeleton")["scheme"])
    traj = solve_skeleton(cfg.field, cfg.initial, control, cfg.grid, cfg.eval_points, scheme)
    save_flow(traj, args.out, args.binary)
    control.save_csv(os.path.join(args.out, "control.csv"))
    print(f"✓ Skeleton solved with {scheme.value} steps, control energy {control.squared_norm() / 2:.6g}")
    return flow_summary(traj), {}


def cmd_rate(cfg: RunConfig, args) -> Results:
    spec = cfg.block("rate")
    target = cfg.target()
    estimate = minimize_rate(cfg.field, cfg.initial, target, cfg.rate_options(args.workers))
    estimate.control.save_csv(os.path.join(args.out, "control.csv"))

    results = {"target": target.to_dict(), "estimate": estimate.to_dict()}
    checks = {"converged": estimate.converged}
    if spec["oracle"] is not None:
        oracle = spec["oracle"]
        error = abs(estimate.energy - oracle)
        rel = error / oracle if oracle > 0 else error
        results["oracle"] = {"value": oracle, "relative_error": rel}
        checks["oracle_agreement"] = bool(rel <= ORACLE_RTOL)
    if spec["scan"] is not None:
        scan_spec = spec["scan"]
        values = np.linspace(scan_spec["low"], scan_spec["high"], scan_spec["count"])
        scan = constant_control_scan(cfg.field, cfg.initial, target, cfg.grid, values,
                                     scan_spec["slopes"], scheme=Scheme(spec["scheme"]))
        results["scan"] = scan.to_dict()
        if scan.feasible:
            checks["not_above_scan"] = bool(estimate.energy <= scan.energy * (1 + ORACLE_RTOL) + 1e-9)

    write_json({"schema_version": SCHEMA_VERSION, "provenance": provenance(cfg), **results},
               os.path.join(args.out, "rate.json"))
    print(f"{'✓' if estimate.converged else '✗'} {estimate}")
    return results, checks


def _write_report(report: LdpReport, cfg: RunConfig, out_dir: str, name: str):
    data = report.to_dict()
    data["provenance"] = provenance(cfg)
    write_json(data, os.path.join(out_dir, f"{name}.json"))
    report.to_csv(os.path.join(out_dir, f"{name}.csv"))


def cmd_ldp1(cfg: RunConfig, args) -> Results:
    spec = cfg.block("sweep")
    sweep = SweepConfig(
        epsilons=spec["epsilons"],
        replicas=spec["replicas"],
        seed=cfg.seed,
        norm=cfg.norm,
        budget=spec["budget"],
        workers=args.workers,
        block_size=spec["block_size"],
        slope_band=tuple(spec["slope_band"]),
        track_measures=spec["track_measures"],
    )
    control = cfg.control()
    report = ldp1_sweep(cfg.field, cfg.initial, lambda eps: control, sweep, cfg.eval_points)
    _write_report(report, cfg, args.out, "ldp1")
    print(f"Fitted slope of log mean norm in log eps: {report.slope}")
    return report.to_dict(), report.checks


def cmd_ldp2(cfg: RunConfig, args) -> Results:
    spec = cfg.block("ldp2")
    h = cfg.control()
    family = oscillation_family(h, spec["amplitude"], spec["mode"])
    report = ldp2_sweep(cfg.field, cfg.initial, h, family, spec["n_list"], cfg.norm,
                        spec["tolerance"], cfg.eval_points)
    _write_report(report, cfg, args.out, "ldp2")
    print(f"Kendall tau of norm against n: {report.oracle.get('kendall_tau')}")
    return report.to_dict(), report.checks


def build_event(spec: Dict) -> EventSpec:
    target = EventTarget(spec["target"])
    x0 = spec.get("x0")
    if spec["kind"] == "half_space":
        return EventSpec.half_space(spec["normal"], spec["level"], x0, target)
    if spec["kind"] == "ball":
        return EventSpec.ball(spec["center"], spec["radius"], x0, target)
    return EventSpec.whole_space(x0, target)


def cmd_scaling(cfg: RunConfig, args) -> Results:
    spec = cfg.block("scaling")
    event = build_event(cfg.block("event"))
    report = scaling_check(cfg.field, cfg.initial, event, spec["epsilons"], spec["n_mc"], cfg.seed,
                           cfg.rate_options(args.workers), spec["use_tilt"], spec["band"], args.workers)
    _write_report(report, cfg, args.out, "scaling")
    print(f"Rate at the event boundary: {report.oracle.get('rate')}")
    return report.to_dict(), report.checks


def _mean_z(samples: np.ndarray) -> float:
    mean = float(np.mean(samples))
    spread = float(np.std(samples, ddof=1))
    if spread == 0.0:
        return 0.0 if mean == 0.0 else float(np.inf)
    return mean / (spread / np.sqrt(samples.size))


def cmd_weakcheck(cfg: RunConfig, args) -> Results:
    spec = cfg.block("weakcheck")
    field, init, grid, eps = cfg.field, cfg.initial, cfg.grid, cfg.epsilon
    noise = sample_noise(grid, field.modes, cfg.seed)
    traj = solve_sde(field, init, noise, eps, grid)
    radius = spec["radius"] if spec["radius"] is not None else default_cutoff_radius(traj)
    phi = TestFunction.monomial(spec["alpha"], radius, spec["flat_radius"], spec["scale"])

    residual = weak_residual(traj, field, phi, noise, eps)
    residual.save_csv(os.path.join(args.out, "residual.csv"))
    results: Dict = {"test_function": phi.name, "radius": radius, "residual": residual.to_dict()}
    checks = {"starts_at_zero": bool(residual.per_step[0] == 0.0)}

    terminal = terminal_residuals(field, init, phi, eps, grid, spec["replicas"], cfg.seed)
    z = _mean_z(terminal)
    results["martingale"] = {"mean": float(np.mean(terminal)), "z_score": z, "replicas": spec["replicas"]}
    checks["martingale_mean_zero"] = bool(abs(z) <= Z_LIMIT)

    qv = quadratic_variation_check(traj, field, phi, eps, spec["qv_replicas"], cfg.seed)
    results["quadratic_variation"] = qv.to_dict()
    checks["quadratic_variation"] = qv.passed(Z_LIMIT)

    if spec["levels"] >= 2:
        refinement = weak_residual_refinement(field, init, phi, eps, grid, spec["levels"],
                                              spec["replicas"], cfg.seed)
        results["refinement"] = refinement.to_dict()
        if eps > 0 and np.isfinite(refinement.order):
            checks["refinement_order"] = bool(abs(refinement.order - 1.0) <= REFINEMENT_BAND)

    print(f"Residual max |R| = {residual.max_abs():.3e}, martingale z = {z:.2f}, QV z = {qv.z_score:.2f}")
    return results, checks


def cmd_moments(cfg: RunConfig, args) -> Results:
    spec = cfg.block("moments")
    moments = moment_bounds_check(cfg.field, cfg.initial, spec["x"], spec["p"], spec["replicas"],
                                  cfg.seed, cfg.grid, spec["epsilon"], cfg.norm,
                                  spec["spread_limit"], args.workers)
    lipschitz = flow_lipschitz_check(cfg.field, cfg.initial, spec["lipschitz_x"], spec["separations"],
                                     spec["replicas"], cfg.seed, cfg.grid, spec["epsilon"],
                                     spec["spread_limit"], args.workers)
    _write_report(moments, cfg, args.out, "moments")
    _write_report(lipschitz, cfg, args.out, "lipschitz")
    checks = {f"moments_{k}": v for k, v in moments.checks.items()}
    checks.update({f"lipschitz_{k}": v for k, v in lipschitz.checks.items()})
    print(f"Moment ratio spread {moments.oracle['spread']:.3g}, "
          f"Lipschitz ratio spread {lipschitz.oracle['spread']:.3g}")
    return {"moments": moments.to_dict(), "lipschitz": lipschitz.to_dict()}, checks


HANDLERS: Dict[str, Callable] = {
    "simulate": cmd_simulate,
    "skeleton": cmd_skeleton,
    "rate": cmd_rate,
    "ldp1": cmd_ldp1,
    "ldp2": cmd_ldp2,
    "scaling": cmd_scaling,
    "weakcheck": cmd_weakcheck,
    "moments": cmd_moments,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Small-noise and regularity experiments for interacting SDE flows"
    )
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", required=True, help="Output directory (created if missing)")
    parser.add_argument("--workers", type=int, default=int(os.environ.get("LDP_WORKERS", "1")),
                        help="Worker threads for replica blocks (default: $LDP_WORKERS or 1)")
    parser.add_argument("--strict", action="store_true",
                        help="Exit with status 3 when any acceptance check fails")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="Replace the configured noise seed")
    parser.add_argument("--binary", action="store_true",
                        help="Also write trajectory.bin (simulate and skeleton)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return parser


def run(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.workers < 1:
        print(f"✗ --workers must be at least 1, got {args.workers}")
        return EXIT_CONFIG

    try:
        cfg = resolve_config(load_config(args.config), args.command, args.seed_override)
    except ConfigError as e:
        print(f"✗ Configuration error: {e}")
        return EXIT_CONFIG

    os.makedirs(args.out, exist_ok=True)
    print_separator()
    print(f"{args.command.upper()}: {cfg.field} on {cfg.grid.steps} steps, seed {cfg.seed}")
    print_separator()

    try:
        results, checks = HANDLERS[args.command](cfg, args)
    except SimulationError as e:
        logger.error("Numerical failure: %s", e)
        print(f"✗ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except ValueError as e:
        logger.error("Invalid input: %s", e)
        print(f"✗ Invalid input: {e}")
        return EXIT_CONFIG

    passed = all(checks.values())
    write_json({
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "provenance": provenance(cfg),
        "config": cfg.resolved,
        "results": results,
        "checks": checks,
        "passed": passed,
    }, os.path.join(args.out, "summary.json"))

    print_separator()
    for name, ok in checks.items():
        print(f"{'✓' if ok else '✗'} {name}")
    print(f"Outputs written to {args.out}")

    if args.strict and not passed:
        return EXIT_CHECK_FAILED
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
