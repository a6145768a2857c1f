#!/usr/bin/env python3
"""
Degenerate Elliptic Regularity Lab
Batch driver for the solve / estimate / table / oracle / sclimit workflows.

Every command writes its outputs plus a manifest.json into --out-dir.

Usage:
    python run_lab.py <command> [options]

Example:
    python run_lab.py solve --gamma 1 --op trace --f const:1 --bc oracle:radial --dim 2 --n 129
"""

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from field_csv import read_field_csv, write_field_csv, write_table_csv
from grid import make_grid, sample
from lab_config import default_seed, default_solve_config, load_solve_config, out_dir
from manifest import RunManifest, write_json
from operators import DegeneracySpec, pucci_minus, pucci_plus, trace_operator
from oracle import ORACLE_NAMES, build_oracle
from regularity import TABLE_COLUMNS, dyadic_decay, exponent_vs_gamma_table, print_decay_report
from solver import (
    ConvergenceFailure,
    NumericalBlowupError,
    ProblemSpec,
    ShootingError,
    constant_fn,
    eps_schedule_to,
    sc_distances,
    sc_limit_family,
    solve_dirichlet,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
ORACLE_CHECK_TOL = 1e-10
CHECK_MARGIN = 0.05
CHECK_DRAWS_PER_POINT = 100
SCLIMIT_COLUMNS = ["delta", "c1_distance", "final_residual", "above_threshold", "error"]


class LabArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the lab's usage code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"❌ Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def parse_float_list(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    return [float(x) for x in text.split(",")]


def parse_source(spec: str) -> Callable:
    """--f grammar: const:<v>"""
    kind, _, value = spec.partition(":")
    if kind != "const" or not value:
        raise ValueError(f"source must look like const:<v>, got '{spec}'")
    return constant_fn(float(value))


def parse_boundary(spec: str, gamma: float, dim: int, p: float) -> Callable:
    """--bc grammar: oracle:<name> or const:<v>"""
    kind, _, value = spec.partition(":")
    if kind == "const" and value:
        return constant_fn(float(value))
    if kind == "oracle" and value:
        oracle = build_oracle(value, gamma=gamma, d=dim, p=p)
        if oracle.dim != dim:
            raise ValueError(f"oracle '{value}' is {oracle.dim}-dimensional, the grid is {dim}-dimensional")
        return oracle.eval
    raise ValueError(f"boundary must look like oracle:<name> or const:<v>, got '{spec}'")


def build_operator(args):
    if args.op == "trace":
        return trace_operator()
    if args.op == "pucci-minus":
        return pucci_minus(args.lam, args.Lam)
    return pucci_plus(args.lam, args.Lam)


def build_config(args, dim: int):
    if args.config:
        config = load_solve_config(args.config, dim)
        overrides = {}
        if args.tol is not None:
            overrides["tol"] = args.tol
        if args.eps_min is not None:
            overrides["eps_schedule"] = eps_schedule_to(args.eps_min)
        if args.max_iters is not None:
            overrides["max_iters"] = args.max_iters
        if args.scheme is not None:
            overrides["scheme"] = args.scheme
        return replace(config, **overrides)
    return default_solve_config(dim, tol=args.tol, eps_min=args.eps_min, max_iters=args.max_iters,
                                scheme=args.scheme or "implicit")


def start_run(args, command: str) -> tuple[Path, RunManifest]:
    target = Path(args.out_dir) if args.out_dir else out_dir()
    target.mkdir(parents=True, exist_ok=True)
    parameters = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")}
    seed = args.seed if args.seed is not None else default_seed()
    return target, RunManifest(command=command, parameters=parameters, seed=seed)


def banner(title: str) -> None:
    print("\n" + "="*60)
    print(f"🔧 {title}")
    print("="*60 + "\n")


def cmd_solve(args) -> int:
    if args.gamma < 0:
        raise ValueError(f"--gamma must be >= 0, got {args.gamma}")
    started = time.time()
    target, manifest = start_run(args, "solve")
    banner(f"SOLVE - gamma={args.gamma:g}, {args.op}, dim={args.dim}, n={args.n}")

    grid = make_grid(args.dim, args.n, args.lo, args.hi)
    problem = ProblemSpec(
        F=build_operator(args),
        H=DegeneracySpec(args.gamma),
        f=parse_source(args.f),
        boundary=parse_boundary(args.bc, args.gamma, args.dim, args.p),
        domain=grid,
    )
    config = build_config(args, args.dim)
    manifest.parameters["solve_config"] = config.to_dict()
    try:
        solution, diagnostics = solve_dirichlet(problem, config)
    except ConvergenceFailure as e:
        manifest.diagnostics = e.diagnostics.to_dict()
        manifest.wall_clock = time.time() - started
        manifest.save(target)
        print(f"❌ {e}")
        return EXIT_NUMERICAL

    path = write_field_csv(solution, target / "solution.csv")
    manifest.add_output(path)
    manifest.diagnostics = diagnostics.to_dict()
    manifest.wall_clock = time.time() - started
    manifest.save(target)
    print(f"\n✅ SUCCESS! Residual {diagnostics.final_residual:.3e}, solution written: {path}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    source = Path(args.input)
    if not source.exists():
        print(f"❌ Error: field file not found: {source}")
        return EXIT_USAGE
    started = time.time()
    target, manifest = start_run(args, "estimate")
    banner(f"ESTIMATE - {source.name}, rho0={args.rho0:g}, K={args.K}")

    field = read_field_csv(source)
    center = parse_float_list(args.center) if args.center else [0.0] * field.grid.dim
    if len(center) != field.grid.dim:
        raise ValueError(f"--center needs {field.grid.dim} coordinates, got {len(center)}")
    report = dyadic_decay(field, np.array(center), args.rho0, args.K)
    print_decay_report(report)

    path = write_json(report.to_dict(), target / "decay.json")
    manifest.add_output(path)
    manifest.diagnostics = {"alpha_hat": report.alpha_hat, "flags": report.flags}
    manifest.wall_clock = time.time() - started
    manifest.save(target)
    if report.saturated:
        print("⚠️  Field is affine to rounding precision: exponent saturated")
    print(f"✅ Decay report written: {path}")
    return EXIT_OK


def cmd_table(args) -> int:
    gammas = parse_float_list(args.gammas)
    if not gammas:
        raise ValueError("--gammas must list at least one value")
    if any(g < 0 for g in gammas):
        raise ValueError(f"gammas must be >= 0, got {gammas}")
    started = time.time()
    target, manifest = start_run(args, "table")
    banner(f"EXPONENT TABLE - gammas {gammas}")

    grid = make_grid(args.dim, args.n, args.lo, args.hi)
    config = build_config(args, args.dim)
    manifest.parameters["solve_config"] = config.to_dict()
    rows = exponent_vs_gamma_table(gammas, config, grid, args.rho0, args.K)

    path = write_table_csv(rows, TABLE_COLUMNS, target / "table.csv")
    manifest.add_output(path)
    succeeded = sum(1 for row in rows if row["alpha_hat"] is not None)
    manifest.diagnostics = {"rows": len(rows), "succeeded": succeeded}
    manifest.wall_clock = time.time() - started
    manifest.save(target)

    for row in rows:
        alpha = "failed" if row["alpha_hat"] is None else f"{row['alpha_hat']:.4f}"
        print(f"  gamma={row['gamma']:<6g} │ alpha_hat={alpha:>8} │ theory={row['alpha_theory']:.4f}")
    if succeeded == 0:
        print("❌ Every row failed")
        return EXIT_NUMERICAL
    print(f"\n✅ Table written: {path} ({succeeded}/{len(rows)} rows)")
    return EXIT_OK


def oracle_self_check(oracle, lo: float, hi: float, seed: int, count: int = 100) -> Optional[float]:
    """
    Max |residual| of the defining equation at `count` random points at least
    CHECK_MARGIN away from the singular set. At most CHECK_DRAWS_PER_POINT * count
    points are drawn; ValueError if none of them is admissible.
    """
    if oracle.residual_fn is None:
        return None
    rng = np.random.default_rng(seed)
    worst = 0.0
    found = 0
    for _ in range(CHECK_DRAWS_PER_POINT * count):
        if found == count:
            break
        point = rng.uniform(lo, hi, oracle.dim)
        if oracle.singular_distance(point) < CHECK_MARGIN:
            continue
        worst = max(worst, abs(oracle.residual(point)))
        found += 1
    if found == 0:
        raise ValueError(f"no admissible points: every sample of [{lo:g}, {hi:g}]^{oracle.dim} lies within "
                         f"{CHECK_MARGIN:g} of the singular set")
    if found < count:
        print(f"⚠️  Only {found} of {count} sample points were admissible")
    return worst


def cmd_oracle(args) -> int:
    started = time.time()
    target, manifest = start_run(args, "oracle")
    oracle = build_oracle(args.name, gamma=args.gamma, d=args.d, p=args.p, psi_power=args.psi_power)
    banner(f"ORACLE - {oracle.name}, dim={oracle.dim}, n={args.n}")

    grid = make_grid(oracle.dim, args.n, args.lo, args.hi)
    path = write_field_csv(sample(grid, oracle.eval), target / "field.csv")
    manifest.add_output(path)
    manifest.diagnostics = {"oracle": oracle.metadata()}

    status = EXIT_OK
    if args.check:
        try:
            worst = oracle_self_check(oracle, args.lo, args.hi, manifest.seed)
        except ValueError as e:
            manifest.diagnostics["check_error"] = str(e)
            manifest.wall_clock = time.time() - started
            manifest.save(target)
            print(f"❌ Residual check impossible: {e}")
            return EXIT_USAGE
        manifest.diagnostics["max_residual"] = worst
        if worst is None:
            print("ℹ️  Oracle has no defining equation attached, nothing to check")
        elif not oracle.zero_residual:
            print(f"ℹ️  Bounded-residual oracle: max |residual| = {worst:.3e} off the singular set")
        elif worst <= ORACLE_CHECK_TOL:
            print(f"✅ Residual check passed: max |residual| = {worst:.3e}")
        else:
            print(f"❌ Residual check failed: max |residual| = {worst:.3e}")
            status = EXIT_NUMERICAL
    manifest.wall_clock = time.time() - started
    manifest.save(target)
    print(f"📄 Field written: {path}")
    return status


def cmd_sclimit(args) -> int:
    deltas = parse_float_list(args.deltas)
    if not deltas:
        raise ValueError("--deltas must list at least one value")
    started = time.time()
    target, manifest = start_run(args, "sclimit")
    banner(f"SC-LIMIT - deltas {deltas}")

    grid = make_grid(args.dim, args.n, args.lo, args.hi)
    config = build_config(args, args.dim)
    manifest.parameters["solve_config"] = config.to_dict()
    boundary = parse_boundary(args.bc, args.gamma, args.dim, args.p)
    members = sc_limit_family(trace_operator(), parse_source(args.f), deltas, grid, boundary,
                              config, alpha0=args.alpha0)
    distances = sc_distances(members, args.radius)

    rows = []
    for member, distance in zip(members, distances):
        rows.append({
            "delta": member.delta,
            "c1_distance": distance,
            "final_residual": member.diagnostics.final_residual if member.diagnostics else None,
            "above_threshold": member.above_threshold,
            "error": member.error or "",
        })
    path = write_table_csv(rows, SCLIMIT_COLUMNS, target / "sclimit.csv")
    manifest.add_output(path)
    failed = sum(1 for m in members if m.field is None)
    manifest.diagnostics = {"members": len(members), "failed": failed}
    manifest.wall_clock = time.time() - started
    manifest.save(target)

    for row in rows:
        distance = "" if row["c1_distance"] is None else f"{row['c1_distance']:.4e}"
        print(f"  delta={row['delta']:<6g} │ C1 distance to previous: {distance}")
    if failed == len(members):
        print("❌ Every member failed")
        return EXIT_NUMERICAL
    print(f"\n✅ SC-limit table written: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default=None,
                        help="Output directory (default: $LAB_OUT_DIR or current directory)")
    common.add_argument("--seed", type=int, default=None, help="Random seed (default: $LAB_SEED or 0)")
    common.add_argument("--tol", type=float, default=None, help="Residual target (default: 1e-6 in 1D, 1e-5 in 2D)")
    common.add_argument("--eps-min", type=float, default=None, help="Final regularization (default: 1e-4)")
    common.add_argument("--max-iters", type=int, default=None, help="Iterations per eps stage (default: 2000)")
    common.add_argument("--scheme", choices=["implicit", "explicit"], default=None,
                        help="Pseudo-time scheme (default: implicit)")
    common.add_argument("--config", default=None, help="Flat key=value solver config file")

    grid_args = argparse.ArgumentParser(add_help=False)
    grid_args.add_argument("--dim", type=int, default=2, choices=[1, 2], help="Dimension (default: 2)")
    grid_args.add_argument("--lo", type=float, default=-1.0, help="Box lower corner (default: -1)")
    grid_args.add_argument("--hi", type=float, default=1.0, help="Box upper corner (default: 1)")
    grid_args.add_argument("--p", type=float, default=3.0, help="p for the p-radial oracle (default: 3)")

    parser = LabArgumentParser(
        description="Numerical laboratory for degenerate fully nonlinear elliptic equations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run_lab.py solve --gamma 1 --op trace --f const:1 --bc oracle:radial --dim 2 --n 129
  python run_lab.py estimate --in solution.csv --center 0,0 --rho0 0.5 --K 6
  python run_lab.py table --gammas 0.5,1,2,3
  python run_lab.py oracle --name aronsson --n 257
  python run_lab.py sclimit --deltas 0.4,0.2,0.1
        """
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    solve = commands.add_parser("solve", parents=[common, grid_args], help="Solve a Dirichlet problem")
    solve.add_argument("--gamma", type=float, required=True, help="Degeneracy exponent (>= 0)")
    solve.add_argument("--op", default="trace", choices=["trace", "pucci-minus", "pucci-plus"],
                       help="Diffusion operator (default: trace)")
    solve.add_argument("--lam", type=float, default=1.0, help="Ellipticity lambda (default: 1)")
    solve.add_argument("--Lam", type=float, default=1.0, help="Ellipticity Lambda (default: 1)")
    solve.add_argument("--f", default="const:1", help="Source, const:<v> (default: const:1)")
    solve.add_argument("--bc", default="oracle:radial", help="Boundary data, oracle:<name> or const:<v>")
    solve.add_argument("--n", type=int, default=129, help="Points per axis (default: 129)")
    solve.set_defaults(func=cmd_solve)

    estimate = commands.add_parser("estimate", parents=[common], help="Measure the decay exponent of a field")
    estimate.add_argument("--in", dest="input", required=True, help="Field CSV")
    estimate.add_argument("--center", default=None, help="Center as comma-separated coordinates (default: origin)")
    estimate.add_argument("--rho0", type=float, default=0.5, help="Dyadic ratio (default: 0.5)")
    estimate.add_argument("--K", type=int, default=8,
                         help="Deepest level (default: 8, cut where balls span under 4 cells)")
    estimate.set_defaults(func=cmd_estimate)

    table = commands.add_parser("table", parents=[common, grid_args], help="Exponent versus gamma table")
    table.add_argument("--gammas", default="0.5,1,2,3", help="Comma-separated gammas (default: 0.5,1,2,3)")
    table.add_argument("--n", type=int, default=129, help="Points per axis (default: 129)")
    table.add_argument("--rho0", type=float, default=0.5, help="Dyadic ratio (default: 0.5)")
    table.add_argument("--K", type=int, default=6,
                         help="Deepest level (default: 6, cut where balls span under 4 cells)")
    table.set_defaults(func=cmd_table)

    oracle = commands.add_parser("oracle", parents=[common], help="Sample an exact solution")
    oracle.add_argument("--name", required=True, choices=ORACLE_NAMES, help="Oracle name")
    oracle.add_argument("--gamma", type=float, default=1.0, help="Degeneracy exponent (default: 1)")
    oracle.add_argument("--d", type=int, default=2, choices=[1, 2], help="Dimension of radial oracles (default: 2)")
    oracle.add_argument("--p", type=float, default=3.0, help="p for p-radial (default: 3)")
    oracle.add_argument("--psi-power", type=float, default=4.0 / 3.0,
                        help="Radial power for radial-plus-smooth (default: 4/3)")
    oracle.add_argument("--n", type=int, default=257, help="Points per axis (default: 257)")
    oracle.add_argument("--lo", type=float, default=-1.0, help="Box lower corner (default: -1)")
    oracle.add_argument("--hi", type=float, default=1.0, help="Box upper corner (default: 1)")
    oracle.add_argument("--check", action="store_true", help="Also check the defining equation")
    oracle.set_defaults(func=cmd_oracle)

    sclimit = commands.add_parser("sclimit", parents=[common, grid_args], help="Vanishing-exponent family")
    sclimit.add_argument("--deltas", default="0.4,0.2,0.1", help="Strictly decreasing deltas (default: 0.4,0.2,0.1)")
    sclimit.add_argument("--gamma", type=float, default=1.0, help="gamma of the radial boundary oracle (default: 1)")
    sclimit.add_argument("--f", default="const:1", help="Source g, const:<v> (default: const:1)")
    sclimit.add_argument("--bc", default="oracle:radial", help="Boundary data (default: oracle:radial)")
    sclimit.add_argument("--n", type=int, default=65, help="Points per axis (default: 65)")
    sclimit.add_argument("--radius", type=float, default=0.8, help="Radius of the C1 comparison ball (default: 0.8)")
    sclimit.add_argument("--alpha0", type=float, default=None, help="Flag members with delta > 1 - alpha0")
    sclimit.set_defaults(func=cmd_sclimit)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConvergenceFailure, NumericalBlowupError, ShootingError) as e:
        print(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        print(f"❌ Error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
