"""Command-line surface: train, oracle, simulate, compare, score.

Every command reads one scenario config, derives all artifacts inside the
output directory, and drops a manifest (seed, config hash, tool version,
produced files) that suffices to reproduce the run.  Exit codes: 0 success
(and safe, where a safety verdict applies), 1 usage or config error,
2 runtime failure, 3 safety violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .barriers import CbvfBarrier
from .config import config_hash, load_config, resolve_config_path, serialize_config
from .hybrid import refinement_order, transition_pairs, validate_system
from .network import load_weights, save_weights
from .oracle import (
    GridBarrier,
    load_value_function,
    save_value_function,
    score_network,
    solve_cbvf,
)
from .scenarios import CONTROLLER_NAMES, ConfigError, Scenario, WrappedAngleBarrier, build_scenario
from .sim import execute_hybrid, run_summary, safety_check, write_trajectory_csv
from .training import refine_all, refine_all_grid

log = logging.getLogger("safeswitch")

FULL_SCALE_REFERENCE = (
    "full-scale reference points (not asserted at desk scale): "
    "mse 1.9e-03, unsafe volume error < 0.1%, safe volume error < 12%"
)


class SafetyViolation(RuntimeError):
    pass


def _prepare(args) -> tuple[dict, Scenario, Path]:
    cfg = load_config(resolve_config_path(args.config))
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    scenario = build_scenario(cfg)
    diags = validate_system(scenario.system)
    if diags:
        raise ConfigError("invalid hybrid system: " + "; ".join(diags))
    out_dir = Path(args.out_dir or cfg.get("out_dir", "runs/" + scenario.kind))
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, scenario, out_dir


def _write_manifest(out_dir: Path, command: str, cfg: dict, files: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": int(cfg.get("seed", 0)),
        "config_sha256": config_hash(cfg),
        "version": __version__,
        "files": sorted(files),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    with open(out_dir / "config.resolved.yaml", "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def _weight_path(out_dir: Path, label: str) -> Path:
    return out_dir / f"weights_{label.replace('@', '_v')}.json"


def _vf_path(out_dir: Path, label: str) -> Path:
    return out_dir / f"vf_{label.replace('@', '_v')}.bin"


def _neural_barriers(scenario: Scenario, weights_dir: Path) -> dict[int, object]:
    refined = dict(scenario.barriers)
    angle_idx = scenario.extras.get("angle_indices")
    for q in scenario.refined_mode_indices():
        label = scenario.system.label(q)
        path = _weight_path(weights_dir, label)
        if not path.exists():
            raise ConfigError(
                f"missing weight file {path}; run 'safeswitch train' first"
            )
        net = load_weights(path)
        barrier = CbvfBarrier(
            net,
            scenario.training.horizon,
            alpha_rate=scenario.barriers[q].alpha_rate,
            margin=scenario.training.barrier_margin,
            name=f"cbvf_{label}",
        )
        refined[q] = (
            WrappedAngleBarrier(barrier, angle_idx) if angle_idx else barrier
        )
    return refined


def _grid_barriers(scenario: Scenario, values_dir: Path) -> dict[int, object]:
    refined = dict(scenario.barriers)
    for q in scenario.refined_mode_indices():
        label = scenario.system.label(q)
        path = _vf_path(values_dir, label)
        if not path.exists():
            raise ConfigError(
                f"missing value-function file {path}; run 'safeswitch oracle' first"
            )
        vf = load_value_function(path)
        refined[q] = GridBarrier(
            vf,
            alpha_rate=scenario.barriers[q].alpha_rate,
            margin=scenario.oracle_margin,
            name=f"grid_{label}",
        )
    return refined


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, scenario, out_dir = _prepare(args)
    graph = transition_pairs(scenario.system)
    order = refinement_order(graph)
    if not order:
        log.warning("system has a single mode or no transitions; nothing to refine")
        _write_manifest(out_dir, "train", cfg, [])
        return 0
    refined, reports = refine_all(
        scenario.system, order, scenario.barriers, scenario.training, scenario.domains
    )
    files: list[str] = []
    for q, report in reports.items():
        label = scenario.system.label(q)
        wpath = _weight_path(out_dir, label)
        save_weights(refined[q].net, wpath)
        rpath = out_dir / f"train_report_{label.replace('@', '_v')}.csv"
        report.to_csv(rpath)
        files += [wpath.name, rpath.name]
        last = report.epochs[-1]
        print(
            f"refined {label}: boundary loss {last.h1_mean:.3e}, "
            f"residual loss {last.h2_mean:.3e}, wall time {report.wall_time:.1f}s "
            f"-> {wpath}"
        )
    _write_manifest(out_dir, "train", cfg, files)
    return 0


def cmd_oracle(args) -> int:
    cfg, scenario, out_dir = _prepare(args)
    if not scenario.oracle_grids:
        raise ConfigError(
            f"scenario '{scenario.kind}' declares no oracle grids (state dimension "
            "too high); train a neural value function instead"
        )
    order = refinement_order(transition_pairs(scenario.system))
    files = []
    if order:
        refined = refine_all_grid(
            scenario.system,
            order,
            scenario.barriers,
            scenario.oracle_grids,
            scenario.oracle_gamma,
            scenario.oracle_horizon,
            n_slices=scenario.oracle_slices,
            clip=scenario.training.level_clip,
            barrier_margin=scenario.oracle_margin,
        )
        solved = {q: refined[q].vf for q in scenario.refined_mode_indices()}
    else:
        # No transitions to refine: solve each mode's own constraint set.
        solved = {}
        for q, grid in scenario.oracle_grids.items():
            solved[q] = solve_cbvf(
                grid,
                scenario.system.dynamics[q],
                scenario.constraint_fields[q],
                scenario.oracle_gamma,
                scenario.oracle_horizon,
                output_times=np.linspace(0, scenario.oracle_horizon,
                                         scenario.oracle_slices),
            )
    for q, vf in solved.items():
        label = scenario.system.label(q)
        path = _vf_path(out_dir, label)
        save_value_function(vf, path)
        files.append(path.name)
        kernel = vf.values[-1] >= 0
        print(
            f"solved {label}: grid {vf.grid.counts}, "
            f"safe fraction {kernel.mean():.3f} -> {path}"
        )
    if args.certify:
        files += _run_certification(scenario, out_dir)
    _write_manifest(out_dir, "oracle", cfg, files)
    return 0


def _run_certification(scenario: Scenario, out_dir: Path) -> list[str]:
    """Reduced-model check that excluding the unsafe switching set and
    excluding its unavoidable hull give the same safe set (one-cell band)."""
    from .certification import acc_reduced_certification

    if scenario.kind != "acc":
        raise ConfigError("--certify is only defined for the acc scenario")
    result = acc_reduced_certification(scenario)
    save_value_function(result.vf_unsafe, out_dir / "vf_cert_unsafe_set.bin")
    save_value_function(result.vf_avoid, out_dir / "vf_cert_avoid_hull.bin")
    status = "PASS" if result.within_band else "FAIL"
    print(
        f"certification [{status}]: {result.mismatch_cells} mismatching cells, "
        f"all within one cell of the boundary: {result.within_band}"
    )
    return ["vf_cert_unsafe_set.bin", "vf_cert_avoid_hull.bin"]


def cmd_simulate(args) -> int:
    cfg, scenario, out_dir = _prepare(args)
    controller = _build_controller_from_args(scenario, args)
    q0, x0 = scenario.system.initial
    traj = execute_hybrid(
        scenario.system, controller, x0, q0, scenario.sim, scenario.constraint_fields
    )
    safety = safety_check(traj, scenario.constraint_fields)
    cost = scenario.cost_fn(traj) if scenario.cost_fn else None
    csv_path = out_dir / f"trajectory_{args.controller}.csv"
    write_trajectory_csv(traj, csv_path, scenario.state_names, scenario.control_names)
    summary = run_summary(traj, safety, cost)
    summary["controller"] = args.controller
    spath = out_dir / f"summary_{args.controller}.json"
    with open(spath, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _write_manifest(out_dir, f"simulate:{args.controller}", cfg,
                    [csv_path.name, spath.name])
    print(
        f"{args.controller}: safe={safety.safe} min_margin={safety.min_margin:.4f} "
        + (f"cost={cost:.2f} " if cost is not None else "")
        + f"switches={traj.switch_count} -> {csv_path}"
    )
    if not safety.safe:
        print(f"safety violation at t={safety.first_violation_time:.3f}")
        return 3
    return 0


def _build_controller_from_args(scenario: Scenario, args):
    name = args.controller
    refined = None
    if name == "neural_switch_aware":
        refined = _neural_barriers(scenario, Path(args.weights_dir or args.out_dir
                                                  or "runs/" + scenario.kind))
    elif name == "grid_switch_aware":
        refined = _grid_barriers(scenario, Path(args.values_dir or args.out_dir
                                                or "runs/" + scenario.kind))
    return scenario.build_controller(name, refined)


def cmd_compare(args) -> int:
    cfg, scenario, out_dir = _prepare(args)
    names = [n.strip() for n in args.controllers.split(",") if n.strip()]
    rows = []
    q0, x0 = scenario.system.initial
    for name in names:
        try:
            args.controller = name
            controller = _build_controller_from_args(scenario, args)
            traj = execute_hybrid(
                scenario.system, controller, x0, q0, scenario.sim,
                scenario.constraint_fields,
            )
            safety = safety_check(traj, scenario.constraint_fields)
            cost = scenario.cost_fn(traj) if scenario.cost_fn else float("nan")
            rows.append(
                {
                    "controller": name,
                    "safe": "safe" if safety.safe else "UNSAFE",
                    "cost": f"{cost:.2f}",
                    "solve_time": f"{traj.mean_solve_time:.2e}",
                    "error": "",
                }
            )
            write_trajectory_csv(
                traj, out_dir / f"trajectory_{name}.csv",
                scenario.state_names, scenario.control_names,
            )
        except Exception as exc:  # per-row failure; other controllers still run
            log.error("controller %s failed: %s", name, exc)
            rows.append(
                {"controller": name, "safe": "error", "cost": "-",
                 "solve_time": "-", "error": str(exc)}
            )
    header = f"{'controller':<22} {'safety':<8} {'cost':>10} {'solve time (s)':>15}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(
            f"{r['controller']:<22} {r['safe']:<8} {r['cost']:>10} {r['solve_time']:>15}"
        )
    cpath = out_dir / "comparison.csv"
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["controller", "safe", "cost", "solve_time", "error"]
        )
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(out_dir, "compare", cfg, [cpath.name])
    return 0


def cmd_score(args) -> int:
    cfg, scenario, out_dir = _prepare(args)
    net = load_weights(Path(args.weights))
    vf = load_value_function(Path(args.value_function))
    if vf.grid.ndim != net.state_dim:
        raise ConfigError(
            f"domain mismatch: value function is {vf.grid.ndim}-dimensional "
            f"({vf.grid.mins.tolist()}..{vf.grid.maxs.tolist()}), network expects "
            f"{net.state_dim} state dimensions"
        )
    t = float(args.time if args.time is not None else vf.times[-1])
    score = score_network(net, vf, t)
    uve = "undefined" if score.unsafe_volume_error is None else f"{score.unsafe_volume_error:.4f}%"
    sve = "undefined" if score.safe_volume_error is None else f"{score.safe_volume_error:.4f}%"
    print(f"mse {score.mse:.6e}  unsafe-volume-error {uve}  safe-volume-error {sve}")
    print(FULL_SCALE_REFERENCE)
    spath = out_dir / "score.json"
    with open(spath, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "time": t,
                "mse": score.mse,
                "unsafe_volume_error": score.unsafe_volume_error,
                "safe_volume_error": score.safe_volume_error,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    _write_manifest(out_dir, "score", cfg, [spath.name])
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safeswitch",
        description="Safe switching controllers for hybrid systems via "
        "neural control barrier-value functions",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help="scenario config file or builtin:<name>")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out-dir", default=None, help="output directory")

    p = sub.add_parser("train", help="train refined barriers along the transition graph")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="solve grid value functions for refined modes")
    common(p)
    p.add_argument("--certify", action="store_true",
                   help="also run the reduced-model safe-set equivalence check")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("simulate", help="run one closed-loop controller")
    common(p)
    p.add_argument("--controller", required=True, choices=CONTROLLER_NAMES)
    p.add_argument("--weights-dir", default=None)
    p.add_argument("--values-dir", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run several controllers and tabulate")
    common(p)
    p.add_argument("--controllers", required=True,
                   help="comma-separated controller names")
    p.add_argument("--weights-dir", default=None)
    p.add_argument("--values-dir", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("score", help="compare a weight file against a value function")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--value-function", required=True)
    p.add_argument("--time", type=float, default=None,
                   help="evaluation time (default: final stored time)")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SafetyViolation as exc:
        print(f"safety violation: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
