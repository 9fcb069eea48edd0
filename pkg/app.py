import argparse
import dataclasses
import os
import sys

import numpy as np

from config import settings
from config.logging import enable_console, logger
from services import export
from services.escape_optimizer import EscapeProblem, escape_optimize
from services.montecarlo import (
    estimate_moments,
    exit_statistics,
    moments_table,
    simulate_linear,
    simulate_nonlinear,
)
from services.rate_functional import SampledPath, optimal_path, path_energy, transition_time_scan
from services.run_config import load_config, resolve
from services.run_record import RunRecord
from services.steps_solver import (
    eigen_curve,
    solve_covariance_column,
    solve_covariance_diagonal,
    solve_F,
    solve_mean,
    solve_mean_analytic,
)
from utils.exceptions import ConfigError, DelayLDError

COMMANDS = ("mean", "cov", "optimal-path", "escape", "simulate")


# -------------------------
# Helpers
# -------------------------
def _out(ctx, name):
    return ctx.record.add_output(os.path.join(ctx.out, name))


@dataclasses.dataclass
class Context:
    config: object
    run: object
    out: str
    record: RunRecord
    svg: bool = False
    threads: int = 1


# -------------------------
# mean
# -------------------------
def cmd_mean(ctx: Context):
    run = ctx.run
    with ctx.record.stage("mean"):
        mean = solve_mean(run.model, run.history, run.grid)
    export.write_table(_out(ctx, "mean.csv"), mean.table())

    if ctx.config.analytic_check:
        with ctx.record.stage("mean_analytic"):
            analytic = solve_mean_analytic(run.model, run.history, run.grid)
        gap = float(np.max(np.abs(analytic.values - mean.values)))
        export.write_table(_out(ctx, "mean_analytic.csv"), analytic.table())
        export.write_summary(_out(ctx, "mean_check.txt"), {
            "max_gap": gap,
            "delta": run.grid.delta,
        })
        logger.info("backward Euler vs analytic mean: max gap %.3g", gap)

    if ctx.svg:
        export.plot_columns(_out(ctx, "mean.svg"), mean.table(), "mean", "m(t)")


# -------------------------
# cov
# -------------------------
def cmd_cov(ctx: Context):
    run = ctx.run
    with ctx.record.stage("F"):
        F = solve_F(run.model, run.grid)
    with ctx.record.stage("covariance_diagonal"):
        diagonal = solve_covariance_diagonal(run.model, F)
    curve = eigen_curve(diagonal)

    export.write_table(_out(ctx, "cov_diag.csv"), diagonal.table())
    export.write_table(_out(ctx, "eigcurve.csv"), curve.table())
    if diagonal.max_asymmetry > 1e-2:
        ctx.record.warn(f"rho(t,t) antisymmetric part up to {diagonal.max_asymmetry:.3g} (relative)")

    if ctx.svg:
        header = ["t"] + [f"var_{i + 1}" for i in range(run.model.d)]
        export.plot_columns(_out(ctx, "variances.svg"),
                            (header, np.column_stack([run.grid.points, diagonal.variances()])),
                            "variances", "rho_ii(t,t)")
        export.plot_columns(_out(ctx, "eigcurve.svg"), (["t", "lambda_min"], curve.table()[1][:, :2]),
                            "smallest eigenvalue of rho(t,t)^-1")


# -------------------------
# optimal-path
# -------------------------
def cmd_optimal_path(ctx: Context):
    run, target = ctx.run, ctx.config.target
    Q = run.to_model_coordinates(target.Q, target.coordinates)
    with ctx.record.stage("mean"):
        mean = solve_mean(run.model, run.history, run.grid)
    with ctx.record.stage("F"):
        F = solve_F(run.model, run.grid)
    with ctx.record.stage("covariance"):
        diagonal = solve_covariance_diagonal(run.model, F)
        column = solve_covariance_column(run.model, F, target.T)
    with ctx.record.stage("optimal_path"):
        result = optimal_path(mean, column, diagonal.at(target.T), Q)
        check = path_energy(run.model, mean, result.path)

    export.write_table(_out(ctx, "path.csv"), result.path.table())
    summary = {
        "T": result.T,
        "Q": result.Q,
        "energy": result.energy,
        "path_energy": check,
    }
    if run.model.origin is not None:
        summary["Q_absolute"] = run.model.to_absolute(result.Q)

    if target.scan:
        T_large = ctx.config.grid.T_large or run.grid.T
        with ctx.record.stage("time_scan"):
            curve = transition_time_scan(run.model, mean, diagonal, Q, T_large)
        export.write_table(_out(ctx, "energy_curve.csv"), curve.table())
        summary["T_opt"] = curve.T_opt
        summary["energy_opt"] = curve.energy_opt
        for note in curve.notes:
            ctx.record.warn(note)
        if ctx.svg:
            export.plot_columns(_out(ctx, "energy_curve.svg"), curve.table(), "energy vs exit time")

    export.write_summary(_out(ctx, "energy.txt"), summary)
    if ctx.svg:
        export.plot_columns(_out(ctx, "path.svg"), result.path.table(), "optimal path")


# -------------------------
# escape
# -------------------------
def cmd_escape(ctx: Context):
    run, disk, grid_spec = ctx.run, ctx.config.disk, ctx.config.grid
    if disk.center is not None:
        center = run.to_model_coordinates(disk.center, disk.coordinates)
    elif run.model.origin is not None:
        center = np.zeros(run.model.d)
    else:
        raise ConfigError("required for models without a stationary state", "disk.center")

    problem = EscapeProblem(center, disk.R, disk.delta_r, grid_spec.T_large or run.grid.T,
                            run.grid, disk.half)
    with ctx.record.stage("escape"):
        solution = escape_optimize(run.model, run.history, problem)
    for message in solution.warnings:
        ctx.record.warn(message)

    matrix = solution.matrix
    export.write_table(_out(ctx, "energy_matrix.csv"), matrix.table())
    export.write_table(_out(ctx, "boundary_points.csv"), matrix.points_table())
    export.write_table(_out(ctx, "escape_path.csv"), solution.path.path.table())

    summary = {
        "T_opt": solution.T_opt,
        "T_exit": solution.T_exit,
        "at_horizon": solution.at_horizon,
        "q_hat": solution.q_hat,
        "energy": solution.energy,
        "half": disk.half,
        "R": disk.R,
        "delta_r": disk.delta_r,
        "n_points": len(matrix.points),
        "n_excluded": int(matrix.excluded.sum()),
    }
    if solution.q_hat_absolute is not None:
        summary["q_hat_absolute"] = solution.q_hat_absolute
    export.write_summary(_out(ctx, "summary.txt"), summary)

    if ctx.svg:
        mean = solve_mean(run.model, run.history, run.grid)
        j = run.grid.last_index_at_or_before(problem.T_large)
        export.plot_escape(_out(ctx, "escape.svg"), matrix.points, solution.path.path.values,
                           mean.values[: j + 1], solution.q_hat)
        best = np.nanmin(matrix.energies, axis=1)
        export.plot_columns(_out(ctx, "energy_vs_time.svg"),
                            (["t", "min_energy"], np.column_stack([matrix.times, best])),
                            "smallest boundary energy per exit time")


# -------------------------
# simulate
# -------------------------
def cmd_simulate(ctx: Context):
    run, spec = ctx.run, ctx.config.simulation
    config = spec.config
    with ctx.record.stage("simulate"):
        if spec.dynamics == "cle":
            ensemble = simulate_nonlinear(run.nonlinear, run.absolute_history, config, ctx.threads)
            origin = run.state.z
        else:
            ensemble = simulate_linear(run.model, run.history, config, ctx.threads)
            origin = np.zeros(run.model.d)
    for message in ensemble.warnings:
        ctx.record.warn(message)

    summary = {
        "n_paths": ensemble.n_paths,
        "seed": config.seed,
        "epsilon": ensemble.epsilon,
        "dt": config.dt,
        "failed": int(ensemble.failed.sum()),
        "clamped": ensemble.clamp_count,
    }

    if ensemble.n_paths < 2:
        ctx.record.warn("moments need at least 2 paths; moments.csv not written")
    else:
        times = spec.moment_times or tuple(
            k * run.model.tau for k in range(1, int(config.T_sim / run.model.tau + 1e-9) + 1))
        with ctx.record.stage("moments"):
            estimates = estimate_moments(ensemble, times)
        export.write_table(_out(ctx, "moments.csv"), moments_table(estimates))

    disk = ctx.config.disk
    if disk is not None:
        if disk.center is None:
            center = origin
        elif spec.dynamics == "cle":
            center = run.model.to_absolute(disk.center) if disk.coordinates == "local" else disk.center
        else:
            center = run.to_model_coordinates(disk.center, disk.coordinates)
        with ctx.record.stage("exits"):
            stats = exit_statistics(ensemble, center, disk.R)
        export.write_table(_out(ctx, "exits.csv"), stats.table())
        summary["exit_fraction"] = stats.fraction

    if spec.raw_paths:
        P, K, d = ensemble.states.shape
        rows = np.column_stack([np.repeat(np.arange(P), K), np.tile(ensemble.times, P),
                                ensemble.states.reshape(P * K, d)])
        export.write_csv(_out(ctx, "paths.csv"), ["path", "t"] + [f"x_{i + 1}" for i in range(d)], rows)

    export.write_summary(_out(ctx, "simulation.txt"), summary)


HANDLERS = {
    "mean": cmd_mean,
    "cov": cmd_cov,
    "optimal-path": cmd_optimal_path,
    "escape": cmd_escape,
    "simulate": cmd_simulate,
}


# -------------------------
# Entry point
# -------------------------
class CommandLineParser(argparse.ArgumentParser):
    """argparse parser that raises ConfigError on a bad command line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message, "command line")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(
        prog="delayld",
        description="Large deviations for linear delay SDEs: means, covariances, optimal paths, escapes.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML run config (or a name under storage/)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides simulation.seed")
    parser.add_argument("--threads", type=int, default=None, help="Monte Carlo worker threads")
    parser.add_argument("--svg", action="store_true", help="also write SVG figures")
    parser.add_argument("--log-level", default=None, choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def _reject_command_line(argv, exc: ConfigError) -> int:
    """Write a failed run record for a command line the parser rejected."""
    loose = CommandLineParser(add_help=False)
    loose.add_argument("command", nargs="?", default="unknown")
    loose.add_argument("--config", default=None)
    loose.add_argument("--out", default="out")
    try:
        known, _ = loose.parse_known_args(argv)
    except ConfigError:
        known = argparse.Namespace(command="unknown", config=None, out="out")
    record = RunRecord(known.command, config_path=known.config)
    record.finish(exc.exit_code, f"{type(exc).__name__}: {exc}")
    print(f"error code={exc.exit_code} kind={type(exc).__name__} reason={exc}", file=sys.stderr)
    logger.error("command line rejected: %s", exc)
    record.save(known.out)
    return exc.exit_code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _reject_command_line(argv, exc)
    enable_console(args.log_level or settings.LOG_LEVEL)
    record = RunRecord(args.command, config_path=args.config)

    try:
        config = load_config(args.config)
        record.config = config.raw
        config.require(args.command)
        if args.seed is not None and config.simulation is not None:
            sim = dataclasses.replace(config.simulation.config, seed=args.seed)
            config = dataclasses.replace(config, simulation=dataclasses.replace(config.simulation, config=sim))
        threads = settings.THREADS if args.threads is None else args.threads
        if threads < 1:
            raise ConfigError("must be at least 1", "--threads")

        with record.stage("resolve"):
            run = resolve(config)
        ctx = Context(config, run, args.out, record, args.svg, threads)
        HANDLERS[args.command](ctx)
    except DelayLDError as exc:
        record.finish(exc.exit_code, f"{type(exc).__name__}: {exc}")
        print(f"error code={exc.exit_code} kind={type(exc).__name__} reason={exc}", file=sys.stderr)
        logger.error("%s failed: %s", args.command, exc)
    except Exception as exc:
        record.finish(3, f"{type(exc).__name__}: {exc}")
        print(f"error code=3 kind={type(exc).__name__} reason={exc}", file=sys.stderr)
        logger.exception("%s failed unexpectedly", args.command)
    else:
        record.finish(0)
        logger.info("%s finished, %d files in %s", args.command, len(record.outputs), args.out)
    finally:
        record.save(args.out)
    return record.exit_code


if __name__ == "__main__":
    sys.exit(main())
