"""Command-line entry point: scene synthesis, solving, sweeps, derivative checks.

Exit codes: 0 success, 2 configuration or parse error, 3 solver failure,
4 failed verification check.  Every produced file embeds the fully resolved
configuration and seed, enough to reproduce the run byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import io as problem_io
from .errors import ParseError, RsbaError
from .evaluation import (
    SWEEP_KINDS,
    evaluate_solution,
    run_sweep,
    write_csv,
)
from .jacobians import run_jacobian_check
from .problem import Problem
from .solver import BACKENDS, SolverConfig, optimize
from .synthetic import (
    ARRANGEMENTS,
    GroundTruth,
    PerturbMagnitudes,
    SceneConfig,
    add_noise,
    generate_scene,
    perturb_initialization,
)

REPORT_FORMAT_VERSION = "rsba-report v1"


def _add_scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cameras", type=int, default=5)
    p.add_argument("--points", type=int, default=56)
    p.add_argument("--radius", type=float, default=20.0, help="camera sphere radius")
    p.add_argument("--focal", type=float, default=1000.0)
    p.add_argument("--image-w", type=float, default=1280.0)
    p.add_argument("--image-h", type=float, default=1080.0)
    p.add_argument("--speed-ang", type=float, default=10.0, help="deg/frame")
    p.add_argument("--speed-lin", type=float, default=1.0, help="units/frame")
    p.add_argument("--noise", type=float, default=1.0, help="pixel noise sigma")
    p.add_argument("--arrangement", choices=ARRANGEMENTS, default="sphere")
    p.add_argument("--readout-angle", type=float, default=0.0,
                   help="max angle between camera readout axes, degrees")


def _scene_config(args) -> SceneConfig:
    n = args.cameras
    rolls = tuple(args.readout_angle * j / max(n - 1, 1) for j in range(n))
    return SceneConfig(
        n_cameras=n,
        sphere_radius=args.radius,
        n_points=args.points,
        image_w=args.image_w,
        image_h=args.image_h,
        focal=args.focal,
        angular_speed=args.speed_ang,
        linear_speed=args.speed_lin,
        noise_sigma=args.noise,
        readout_angle_deg=rolls,
        seed=args.seed,
        arrangement=args.arrangement,
    )


def cmd_synth(args) -> int:
    cfg = _scene_config(args)
    problem, gt = generate_scene(cfg)
    noisy = add_noise(problem, cfg.noise_sigma, seed=args.seed + 1)
    if args.no_perturb:
        start = noisy
    else:
        mags = PerturbMagnitudes(args.perturb_rot, args.perturb_trans,
                                 args.perturb_vel, args.perturb_point)
        init = perturb_initialization(gt, mags, seed=args.seed + 2)
        start = Problem(init.cameras, init.points, noisy.observations, noisy.prior)
    problem_io.write_problem(start, args.out)
    gt_problem = Problem(gt.cameras, gt.points, gt.observations, noisy.prior)
    problem_io.write_problem(gt_problem, args.gt_out)
    print(json.dumps({
        "format": REPORT_FORMAT_VERSION,
        "command": "synth",
        "config": dataclasses.asdict(cfg),
        "seed": args.seed,
        "out": str(args.out),
        "gt_out": str(args.gt_out),
    }, sort_keys=True))
    return 0


def cmd_solve(args) -> int:
    problem = problem_io.read_problem(args.problem)
    config = SolverConfig(
        max_iterations=args.max_iterations,
        cost_tolerance=args.cost_tolerance,
        gradient_tolerance=args.gradient_tolerance,
        lm_initial_lambda=args.lm_lambda,
        backend=args.backend,
        method=args.method,
    )
    report = optimize(problem, config)
    for k, c in enumerate(report.costs):
        print(f"iteration {k:3d}  cost {c:.12e}")
    print(f"terminated: {report.termination} after {report.n_iterations} iterations")

    if args.out:
        problem_io.write_problem(report.problem, args.out)
    lines = [json.dumps({
        "format": REPORT_FORMAT_VERSION,
        "command": "solve",
        "problem": str(args.problem),
        "config": dataclasses.asdict(config),
    }, sort_keys=True)]
    for k, c in enumerate(report.costs):
        lines.append(json.dumps({"iteration": k, "cost": c}))
    summary = {
        "termination": report.termination,
        "iterations": report.n_iterations,
        "final_cost": report.final_cost,
        "gradient_inf": report.gradient_inf,
        "timings": report.timings,
    }
    if args.gt:
        gt_problem = problem_io.read_problem(args.gt)
        gt = GroundTruth(gt_problem.cameras, gt_problem.points, gt_problem.observations)
        metrics = evaluate_solution(report.problem, gt)
        summary["errors_vs_gt"] = metrics
        print("errors vs ground truth: "
              + " ".join(f"{k}={v:.6e}" for k, v in metrics.items()))
    lines.append(json.dumps(summary, sort_keys=True))
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    return 0


def cmd_sweep(args) -> int:
    methods = args.methods.split(",")
    backends = args.backends.split(",") if args.backends else None
    from .evaluation import default_base

    base = dataclasses.replace(default_base(args.kind), seed=args.seed)
    rows = run_sweep(
        args.kind, methods, trials=args.trials, base=base, backends=backends,
        max_iterations=args.max_iterations, threads=args.threads,
    )
    metadata = {
        "command": "sweep",
        "kind": args.kind,
        "methods": methods,
        "backends": backends,
        "trials": args.trials,
        "seed": args.seed,
        "max_iterations": args.max_iterations,
        "base": dataclasses.asdict(base),
    }
    write_csv(rows, args.out, metadata=metadata)
    n_failed = sum(r.status != "ok" for r in rows)
    print(f"wrote {len(rows)} rows to {args.out} ({n_failed} failed)")
    return 0 if n_failed < len(rows) else 3


def cmd_check_jacobian(args) -> int:
    worst, ok = run_jacobian_check(trials=args.trials, seed=args.seed, h=args.step)
    print(f"{'block':<10} {'max|diff|':>12} {'magnitude':>12} {'relative':>12}")
    for name, w in worst.items():
        print(f"{name:<10} {w['diff']:12.3e} {w['mag']:12.3e} {w['rel']:12.3e}")
    print("jacobian check:", "PASS" if ok else "FAIL")
    if not ok:
        failing = [n for n, w in worst.items()
                   if not (w["diff"] < 1e-8 or w["rel"] < 1e-4)]
        print("failing blocks:", ", ".join(failing))
    return 0 if ok else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsba",
        description="rolling-shutter bundle adjustment: synthesize, solve, sweep",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1,
                        help="trial-level parallelism for sweeps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic problem + ground truth")
    _add_scene_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-out", required=True)
    p.add_argument("--no-perturb", action="store_true",
                   help="write the noisy problem at the true parameters")
    p.add_argument("--perturb-rot", type=float, default=1.0, help="degrees")
    p.add_argument("--perturb-trans", type=float, default=0.1, help="scene units")
    p.add_argument("--perturb-vel", type=float, default=0.1, help="fraction")
    p.add_argument("--perturb-point", type=float, default=0.1, help="scene units")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("solve", help="refine a problem file")
    p.add_argument("problem")
    p.add_argument("--method", choices=("gsba", "dm", "nm", "nw"), default="nw")
    p.add_argument("--backend", choices=BACKENDS, default="schur2")
    p.add_argument("--out", default=None, help="refined problem file")
    p.add_argument("--report", default=None, help="JSON-lines report file")
    p.add_argument("--gt", default=None, help="ground-truth file for error metrics")
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--cost-tolerance", type=float, default=1e-10)
    p.add_argument("--gradient-tolerance", type=float, default=1e-10)
    p.add_argument("--lm-lambda", type=float, default=1e-4)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run one experiment family, write CSV")
    p.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    p.add_argument("--methods", default="nw", help="comma-separated")
    p.add_argument("--backends", default=None, help="comma-separated")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-jacobian", help="analytical vs finite-difference oracle")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_check_jacobian)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RsbaError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
