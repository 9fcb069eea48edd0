"""
Optimal escape from a disk around a metastable state.

For every grid exit time t_j and every point q_k of the discretised circle,
the optimal path energy is

    E[j, k] = 1/2 [rho(t_j,t_j)^-1 (q_k - m(t_j))] . (q_k - m(t_j))

and the escape is the global minimiser of E; the path is rebuilt from one
covariance column at the optimal exit time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from config.logging import logger
from services.delay_model import DelayModel, HistoryPath, TimeGrid, require_valid
from services.rate_functional import (
    TransitionPath,
    check_conditioning,
    conditioning_mask,
    first_argmin,
    optimal_path,
    precision_solve,
    reaches_horizon,
)
from services.steps_solver import (
    CovarianceDiagonal,
    MeanPath,
    solve_covariance_column,
    solve_covariance_diagonal,
    solve_F,
    solve_mean,
)
from utils.exceptions import InfeasibleScanError, ParameterError

HALVES = ("both", "upper", "lower")


@dataclass(frozen=True, eq=False)
class EscapeProblem:
    center: np.ndarray
    R: float
    delta_r: float
    T_large: float
    grid: TimeGrid
    half: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.center.shape != (2,):
            raise ParameterError("escape problems are posed in two dimensions")
        if not self.R > 0:
            raise ParameterError(f"disk radius must be > 0, got {self.R!r}")
        if not 0 < self.delta_r <= self.R:
            raise ParameterError(f"delta_r must lie in (0, R], got {self.delta_r!r}")
        if self.half not in HALVES:
            raise ParameterError(f"half must be one of {HALVES}, got {self.half!r}")
        if self.grid.last_index_at_or_before(self.T_large) < 2:
            raise ParameterError(f"T_large={self.T_large:g} is not reachable on the grid")


@dataclass(frozen=True, eq=False)
class EnergyMatrix:
    times: np.ndarray  # (J,) grid times t_1 .. t_J <= T_large
    points: np.ndarray  # (K, 2)
    energies: np.ndarray  # (J, K), nan on excluded rows
    excluded: np.ndarray  # (J,) ill-conditioned rho(t_j, t_j)

    def table(self):
        header = ["t"] + [f"q{k}" for k in range(len(self.points))]
        return header, np.column_stack([self.times, self.energies])

    def points_table(self):
        return ["k", "x", "y"], np.column_stack(
            [np.arange(len(self.points)), self.points])


@dataclass(frozen=True, eq=False)
class EscapeSolution:
    T_opt: float  # math.inf when the minimum sits at the scan horizon
    T_exit: float  # grid time of the minimising row
    q_hat: np.ndarray
    path: TransitionPath
    energy: float
    matrix: EnergyMatrix
    q_hat_absolute: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def at_horizon(self) -> bool:
        return math.isinf(self.T_opt)


# ------------------------------------------------------------
# Boundary
# ------------------------------------------------------------
def discretize_disk_boundary(center, R: float, delta_r: float, half: str = "both") -> np.ndarray:
    """Points of the circle over abscissas -R, -R + delta_r, ..., R.

    Order: upper branch left to right, then the lower branch left to right;
    the two points at x = +-R belong to both branches and appear once.
    """
    if not R > 0 or not 0 < delta_r <= R:
        raise ParameterError(f"need 0 < delta_r <= R, got R={R!r} delta_r={delta_r!r}")
    if half not in HALVES:
        raise ParameterError(f"half must be one of {HALVES}, got {half!r}")
    v, w = np.asarray(center, dtype=float)

    n = math.floor(2 * R / delta_r + 1e-9)
    xs = np.clip(-R + delta_r * np.arange(n + 1), -R, R)
    if R - xs[-1] <= 1e-9 * R:
        xs[-1] = R
    else:
        xs = np.append(xs, R)
    heights = np.sqrt(np.maximum(R * R - xs * xs, 0.0))

    upper = np.column_stack([v + xs, w + heights])
    lower = np.column_stack([v + xs, w - heights])
    if half == "upper":
        return upper
    if half == "lower":
        return lower
    return np.vstack([upper, lower[heights > 0]])


# ------------------------------------------------------------
# Fixed exit time
# ------------------------------------------------------------
def boundary_energy_profile(mean_T: np.ndarray, diag_T: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Optimal-path energy at a fixed exit time for every boundary point."""
    check_conditioning(diag_T)
    gaps = np.asarray(points, dtype=float) - np.asarray(mean_T, dtype=float)[None, :]
    weights = precision_solve(diag_T, gaps.T).T
    return 0.5 * np.einsum("kd,kd->k", weights, gaps)


def boundary_optimum_fixed_T(mean_T, diag_T: np.ndarray, points: np.ndarray):
    """Brute-force minimiser over the discretised boundary (ties: list order)."""
    energies = boundary_energy_profile(mean_T, diag_T, points)
    k = first_argmin(energies)
    return np.asarray(points[k], dtype=float), float(energies[k])


def eigen_optimum_fixed_T(diag_T: np.ndarray, R: float, center, mean_T=None, tol: float = 1e-9):
    """Exact optimum when m(T) is the disk centre.

    q_hat - center is R times the eigenvector of the largest eigenvalue of
    rho(T,T) (smallest of its inverse), signed toward a positive second
    coordinate; the energy is R^2 / (2 lambda_max(rho(T,T))).
    """
    center = np.asarray(center, dtype=float)
    if mean_T is not None:
        offset = np.linalg.norm(np.asarray(mean_T, dtype=float) - center)
        if offset > tol * (1.0 + np.linalg.norm(center)):
            raise ParameterError(
                f"m(T) is {offset:.3g} away from the disk centre; use boundary_optimum_fixed_T"
            )
    check_conditioning(diag_T)
    w, v = np.linalg.eigh(diag_T)
    direction = v[:, -1]
    lead = direction[1] if abs(direction[1]) > 0 else direction[0]
    if lead < 0:
        direction = -direction
    return center + R * direction, 0.5 * R * R / float(w[-1])


# ------------------------------------------------------------
# Full scan
# ------------------------------------------------------------
def energy_matrix(mean: MeanPath, diagonal: CovarianceDiagonal, points: np.ndarray,
                  T_large: float) -> EnergyMatrix:
    upto = mean.grid.last_index_at_or_before(T_large)
    times = mean.grid.points[1: upto + 1]
    excluded = conditioning_mask(diagonal, upto)
    energies = np.full((upto, len(points)), np.nan)
    ok = ~excluded
    if np.any(ok):
        # gaps[j, :, k] = q_k - m(t_j)
        gaps = points.T[None, :, :] - mean.values[1: upto + 1][ok][:, :, None]
        weights = np.linalg.solve(diagonal.values[1: upto + 1][ok], gaps)
        energies[ok] = 0.5 * np.sum(weights * gaps, axis=1)
    if np.any(excluded):
        logger.warning("energy matrix: %d ill-conditioned exit times masked (first %g, last %g)",
                       int(excluded.sum()), times[excluded][0], times[excluded][-1])
    return EnergyMatrix(times, points, energies, excluded)


def escape_optimize(model: DelayModel, history: HistoryPath, problem: EscapeProblem) -> EscapeSolution:
    """Optimal exit time, exit point and escape path for the disk problem."""
    require_valid(model, history, full_rank=True)
    grid = problem.grid

    mean = solve_mean(model, history, grid)
    F = solve_F(model, grid)
    diagonal = solve_covariance_diagonal(model, F, grid)

    points = discretize_disk_boundary(problem.center, problem.R, problem.delta_r, problem.half)
    matrix = energy_matrix(mean, diagonal, points, problem.T_large)
    if np.all(matrix.excluded):
        raise InfeasibleScanError("every exit time was excluded by conditioning")

    # first occurrence in row-major order: smallest time, then smallest point index
    flat = first_argmin(matrix.energies)
    j_row, k = divmod(flat, len(points))
    energy = float(matrix.energies[j_row, k])
    last_ok = int(np.flatnonzero(~matrix.excluded)[-1])
    horizon = j_row == last_ok or reaches_horizon(np.min(matrix.energies[last_ok]), energy)
    if horizon:
        j_row = last_ok
        k = first_argmin(matrix.energies[last_ok])
        energy = float(matrix.energies[j_row, k])
    T_exit = float(matrix.times[j_row])
    T_opt = math.inf if horizon else T_exit
    q_hat = points[k].copy()

    column = solve_covariance_column(model, F, T_exit)
    path = optimal_path(mean, column, diagonal.at(T_exit), q_hat)

    warnings = []
    if np.any(matrix.excluded):
        warnings.append(f"{int(matrix.excluded.sum())} exit times excluded by conditioning")
    if T_opt == math.inf:
        warnings.append(f"energy minimum at the scan horizon T_large={problem.T_large:g}")
    q_abs = model.to_absolute(q_hat) if model.origin is not None else None
    logger.info("escape: T_opt=%s q_hat=%s energy=%.6g", T_opt, q_hat, energy)
    return EscapeSolution(T_opt, T_exit, q_hat, path, energy, matrix, q_abs, warnings)
