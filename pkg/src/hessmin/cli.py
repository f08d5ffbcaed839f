"""Config-driven pipeline and thin command-line front end.

``hessmin run CONFIG`` executes: validation, operator certification, energy
minimization, density construction, weak-form residuals, estimate checks,
free-boundary extraction; then writes ``report.json`` plus field CSVs to the
output directory in one pass at the end.  ``hessmin plot-data RUNDIR``
re-emits plot-ready long-format CSVs from a completed run.

Exit codes: 0 success, 2 validation error, 3 solver failure, 4 check
failure (any unstable estimate verdict under ``--strict``).

Reruns with identical configs and seeds reproduce the report numerics bit
for bit; ``--threads`` only distributes independent work (certifications,
multistart) and never changes results.  Timings are reported under a
separate key so they can be excluded from reproducibility comparisons.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod, grid as grid_mod
from .energy import ProblemConfig, evaluate
from .errors import ConfigError, HessminError, SolverFailure
from .operators import builtin_operator
from .solver import SolveOptions, multistart
from .system_check import build_pair, default_test_suite, weak_residual_second_equation

ENV_OUTPUT_DIR = "HESSMIN_OUTPUT"
_DEFAULT_OUTPUT = "hessmin-out"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CHECKS = 4


def _build_problem(rc: config_mod.RunConfig, g):
    operator = builtin_operator(rc.problem_operator, rc.grid_dim, rc.problem_coefficient)
    boundary = grid_mod.make_boundary(
        g,
        rc.problem_boundary,
        rc.problem_boundary_amplitude,
        width=rc.problem_boundary_width,
        csv_path=rc.problem_boundary_csv or None,
    )
    if rc.problem_boundary_nonnegative and not boundary.nonnegative:
        boundary = grid_mod.BoundaryData(
            boundary.g, nonnegative=True, profile=boundary.profile
        )
    return ProblemConfig(
        p=rc.problem_p,
        gamma_plus=rc.problem_gamma_plus,
        gamma_minus=rc.problem_gamma_minus,
        operator=operator,
        boundary=boundary,
        smoothing_eps=rc.problem_smoothing_eps,
        hessian_power=rc.problem_hessian_power,
    )


def _solve_options(rc: config_mod.RunConfig) -> SolveOptions:
    return SolveOptions(
        max_iters=rc.solver_max_iters,
        grad_tol=rc.solver_grad_tol,
        eps_schedule=rc.solver_eps_schedule or None,
        step_init=rc.solver_step_init,
        step_shrink=rc.solver_step_shrink,
        sufficient_decrease=rc.solver_sufficient_decrease,
        seed=rc.solver_seed,
        init=rc.solver_init,
    )


def _certification_section(cfg: ProblemConfig, rc, threads: int):
    from .operators import certify_A1, certify_A2, certify_A3, certify_derivative_bounds

    tasks = [
        lambda: certify_A1(cfg.operator, rc.checks_certify_samples, rc.checks_test_seed),
        lambda: certify_A2(cfg.operator, rc.checks_certify_samples, rc.checks_test_seed + 1),
        lambda: certify_A3(cfg.operator, rc.checks_certify_samples, rc.checks_test_seed + 2),
        lambda: certify_derivative_bounds(
            cfg.operator, rc.checks_certify_samples, rc.checks_test_seed + 3
        ),
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(t) for t in tasks]
            reports = [f.result() for f in futures]
    else:
        reports = [t() for t in tasks]
    return [r.to_dict() for r in reports]


def _phase_labels(fb: analysis.FreeBoundary, g) -> np.ndarray:
    labels = np.full(g.shape, "", dtype=object)
    labels[fb.positive_cells] = "+"
    labels[fb.negative_cells] = "-"
    labels[fb.zero_cells] = "0"
    labels[fb.boundary_cells] = "G"
    return labels


def _write_phase_csv(path, g, labels) -> None:
    header = [f"x{i + 1}" for i in range(g.dim)] + ["phase"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for idx in np.ndindex(g.shape):
            if not g.nonexterior[idx]:
                continue
            coords = [repr(float(c)) for c in g.points[idx]]
            writer.writerow(coords + [labels[idx]])


def run_pipeline(
    rc: config_mod.RunConfig,
    *,
    strict: bool = False,
    threads: int = 1,
    output_dir=None,
) -> tuple:
    """Execute the pipeline; returns (exit_code, report, artifacts).

    ``artifacts`` maps file names to writer callables; nothing is written
    here, so validation failures leave the output directory untouched.
    """
    timings = {}
    report = {"schema_version": config_mod.SCHEMA_VERSION, "config": config_mod.to_flat_dict(rc)}
    artifacts = {}

    t0 = time.perf_counter()
    ns = list(rc.grid_refine_n) if rc.grid_refine_n else [rc.grid_n]
    grids = [grid_mod.build_grid(rc.grid_dim, n, rc.grid_band_width) for n in ns]
    base_grid = grids[-1]
    cfg = _build_problem(rc, grids[0])
    timings["setup"] = time.perf_counter() - t0

    if rc.checks_certify:
        t0 = time.perf_counter()
        report["certification"] = _certification_section(cfg, rc, threads)
        timings["certification"] = time.perf_counter() - t0

    opts = _solve_options(rc)
    estimates = []
    t0 = time.perf_counter()
    if len(grids) > 1:
        checks = []
        if rc.checks_localization:
            checks.append("L44_1")
        if rc.checks_integrability:
            checks.append("L44_2")
        if rc.checks_regularity:
            checks.append("T44")
        if rc.checks_holder:
            checks.append("C45")
        if rc.checks_poincare:
            checks.append("P26")
        rr = analysis.refinement_driver(
            cfg,
            grids,
            opts,
            checks=tuple(checks),
            k_tests=rc.checks_test_functions,
            test_seed=rc.checks_test_seed,
            holder_pairs=rc.checks_holder_pairs,
            poincare_samples=rc.checks_poincare_samples,
        )
        result = rr.solves[-1]
        pair = rr.pairs[-1]
        cfg_final = cfg.with_boundary(cfg.boundary.on_grid(base_grid))
        estimates = [v.to_dict() for v in rr.verdicts]
        report["refinement_residual_trace"] = [list(t) for t in rr.residual_trace]
    else:
        cfg_final = cfg
        result = multistart(cfg, base_grid, opts, n_starts=rc.solver_n_starts, max_workers=threads)
        pair = build_pair(cfg, result.u_star)
    timings["solve"] = time.perf_counter() - t0

    breakdown = evaluate(cfg_final, result.u_star, eps=0.0)
    report["solve"] = {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "grad_norm_final": float(result.grad_norm_final),
        "clamp_count": int(result.clamp_count),
        "energy": {
            "hessian_term": breakdown.hessian_term,
            "phase_term": breakdown.phase_term,
            "total": breakdown.total,
            "coercivity_lower_bound": breakdown.coercivity_lower_bound,
        },
        "energy_history_final": result.energy_history[-1],
        "energy_history_length": len(result.energy_history),
        "stage_starts": list(result.stage_starts),
        "start_energies": result.start_energies,
        "pair_clamped_nodes": int(pair.clamped_nodes),
    }

    if rc.checks_residuals:
        t0 = time.perf_counter()
        suite = default_test_suite(base_grid, rc.checks_test_functions, rc.checks_test_seed)
        tau = None if rc.checks_phase_tau < 0 else rc.checks_phase_tau
        rep = weak_residual_second_equation(pair, cfg_final, suite, tau=tau)
        report["residuals"] = {
            "first_eq_residual": rep.first_eq_residual,
            "el_residual_max": rep.el_residual_max,
            "phase_tolerance": rep.phase_tolerance,
            "weak_residuals": [list(r) for r in rep.weak_residuals],
            "tau_sensitivity": [list(r) for r in rep.tau_sensitivity],
        }
        timings["residuals"] = time.perf_counter() - t0

    if len(grids) == 1:
        t0 = time.perf_counter()
        f_inf = analysis.two_phase_source_bound(cfg_final)
        if rc.checks_localization:
            estimates.append(analysis.check_localization(pair, f_inf).to_dict())
        if rc.checks_integrability:
            estimates.append(analysis.check_integrability_gain(pair, f_inf).to_dict())
        if rc.checks_regularity:
            estimates.append(analysis.check_regularity(pair, cfg_final).to_dict())
        if rc.checks_holder:
            estimates.append(
                analysis.check_holder(
                    pair, cfg_final, n_pairs=rc.checks_holder_pairs, seed=rc.checks_test_seed
                ).to_dict()
            )
        if rc.checks_poincare:
            estimates.append(
                analysis.poincare_check(
                    base_grid,
                    cfg_final.p,
                    n_samples=rc.checks_poincare_samples,
                    seed=rc.checks_test_seed,
                ).to_dict()
            )
        timings["estimates"] = time.perf_counter() - t0
    if estimates:
        report["estimates"] = estimates

    if rc.checks_free_boundary:
        t0 = time.perf_counter()
        from .system_check import default_phase_tau

        tau = rc.checks_phase_tau if rc.checks_phase_tau >= 0 else default_phase_tau(pair.u)
        fb = analysis.extract_free_boundary(pair.u, tau)
        report["free_boundary"] = {
            "tau": tau,
            "measures": fb.measures,
            "counts": {
                "positive": int(np.sum(fb.positive_cells)),
                "negative": int(np.sum(fb.negative_cells)),
                "zero": int(np.sum(fb.zero_cells)),
                "boundary": int(np.sum(fb.boundary_cells)),
            },
        }
        labels = _phase_labels(fb, base_grid)
        if rc.output_write_fields:
            artifacts["phase.csv"] = lambda path: _write_phase_csv(path, base_grid, labels)
        timings["free_boundary"] = time.perf_counter() - t0

    if rc.output_write_fields:
        artifacts["u.csv"] = lambda path: grid_mod.save_field_csv(path, pair.u)
        artifacts["m.csv"] = lambda path: grid_mod.save_field_csv(path, pair.m)

    report["timings"] = timings

    code = EXIT_OK
    if strict and any(e.get("verdict") == "unstable" for e in estimates):
        code = EXIT_CHECKS
    return code, report, artifacts


def _resolve_output_dir(rc, override) -> Path:
    if override:
        return Path(override)
    if rc.output_dir:
        return Path(rc.output_dir)
    return Path(os.environ.get(ENV_OUTPUT_DIR, _DEFAULT_OUTPUT))


def _write_outputs(out_dir: Path, report: dict, artifacts: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, writer in artifacts.items():
        writer(out_dir / name)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")


def cmd_run(args) -> int:
    try:
        rc = config_mod.load_config(args.config)
        if args.seed is not None:
            rc.solver_seed = args.seed
            rc.checks_test_seed = args.seed
            config_mod.validate(rc)
        out_dir = _resolve_output_dir(rc, args.output)
    except ConfigError as exc:
        print(f"config validation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code, report, artifacts = run_pipeline(
            rc, strict=args.strict, threads=max(args.threads, 1)
        )
    except ConfigError as exc:
        print(f"config validation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver stage failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except HessminError as exc:
        print(f"pipeline failed during checks: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_outputs(out_dir, report, artifacts)
    print(f"run complete: report and fields in {out_dir}")
    return code


def _read_field_csv_rows(path: Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def cmd_plot_data(args) -> int:
    """Re-emit plot-ready long-format CSVs from a completed run directory."""
    run_dir = Path(args.run_dir)
    report_path = run_dir / "report.json"
    if not report_path.is_file():
        print(f"not a run directory (missing report.json): {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = json.loads(report_path.read_text())
        flat = report["config"]
        g = grid_mod.build_grid(
            int(flat["grid.dim"]),
            int(flat.get("grid.refine_n", "").split(",")[-1] or flat["grid.n"]),
            float(flat["grid.band_width"]),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"malformed run directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    keep = g.nonexterior
    for name in ("u", "m"):
        src = run_dir / f"{name}.csv"
        if not src.is_file():
            print(f"missing field file: {src}", file=sys.stderr)
            return EXIT_CONFIG
        field = grid_mod.load_field_csv(g, src)
        out = run_dir / f"plot_{name}.csv"
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(g.dim)] + [name])
            for idx in np.ndindex(g.shape):
                if keep[idx]:
                    coords = [repr(float(c)) for c in g.points[idx]]
                    writer.writerow(coords + [repr(float(field.values[idx]))])
    phase_src = run_dir / "phase.csv"
    if phase_src.is_file():
        header, rows = _read_field_csv_rows(phase_src)
        with open(run_dir / "plot_phase.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    print(f"plot data written to {run_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hessmin",
        description="Two-phase Hessian-energy minimization and system verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured pipeline run")
    run_p.add_argument("config", help="path to a flat key-value config file")
    run_p.add_argument("--output", help="output directory (overrides config and env)")
    run_p.add_argument("--strict", action="store_true", help="unstable verdicts exit 4")
    run_p.add_argument("--seed", type=int, default=None, help="override solver and check seeds")
    run_p.add_argument("--threads", type=int, default=1, help="parallelism for independent checks")
    run_p.set_defaults(func=cmd_run)

    plot_p = sub.add_parser("plot-data", help="emit plot-ready CSVs from a run directory")
    plot_p.add_argument("run_dir", help="completed run directory")
    plot_p.set_defaults(func=cmd_plot_data)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
