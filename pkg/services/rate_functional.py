"""
Large-deviations rate functional of a linear delay SDE and its explicit
minimisers.

For a path f started at gamma(0), the centred path g = f - m has energy

    lambda(f) = 1/2 int_0^T | Sigma^-1 [g'(t) - B g(t) - C g(t - tau)] |^2 dt

(g = 0 before t = 0). The most likely path to Q at time T and its energy are

    h^T(s) = m(s) + rho(s,T) rho(T,T)^-1 (Q - m(T))
    lambda(h^T) = 1/2 [rho(T,T)^-1 (Q - m(T))] . (Q - m(T))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg

from config.logging import logger
from config.settings import COND_LIMIT
from services.delay_model import DelayModel, TimeGrid, require_valid
from services.steps_solver import CovarianceColumn, CovarianceDiagonal, MeanPath
from utils.exceptions import ConditioningError, ParameterError


@dataclass(frozen=True, eq=False)
class SampledPath:
    grid: TimeGrid
    values: np.ndarray  # (J + 1, d) on t_0 = 0 .. t_J = T, or the full grid

    @property
    def start(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def table(self):
        times = self.grid.points[: len(self.values)]
        header = ["t"] + [f"h_{i + 1}" for i in range(self.values.shape[1])]
        return header, np.column_stack([times, self.values])


@dataclass(frozen=True, eq=False)
class TransitionPath:
    path: SampledPath
    energy: float
    T: float
    Q: np.ndarray


@dataclass(frozen=True, eq=False)
class EnergyCurve:
    """Energy of the optimal path to a fixed target versus exit time."""

    times: np.ndarray
    energies: np.ndarray  # nan where excluded
    excluded: np.ndarray  # bool mask, ill-conditioned rho(t,t)
    T_opt: float  # math.inf when the minimum sits at the horizon
    energy_opt: float
    notes: list[str] = field(default_factory=list)

    def table(self):
        return ["T", "energy"], np.column_stack([self.times, self.energies])


# ------------------------------------------------------------
# Helpers
# ------------------------------------------------------------
def check_conditioning(rho_TT: np.ndarray, T: float | None = None) -> None:
    cond = np.linalg.cond(rho_TT)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        where = "" if T is None else f" at T={T:g}"
        raise ConditioningError(f"rho(T,T) is near-singular{where} (cond={cond:.3g})")


def precision_solve(rho_TT: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """rho(T,T)^-1 rhs via a symmetric (Cholesky) solve, LU as fallback."""
    try:
        return linalg.cho_solve(linalg.cho_factor(rho_TT), rhs)
    except linalg.LinAlgError:
        return linalg.solve(rho_TT, rhs)


def first_argmin(values: np.ndarray, rtol: float = 1e-12) -> int:
    """Index of the first entry within rounding of the minimum (nan ignored)."""
    flat = np.ravel(values)
    best = np.nanmin(flat)
    slack = rtol * max(abs(best), np.finfo(float).tiny)
    return int(np.flatnonzero(flat <= best + slack)[0])


def reaches_horizon(last_value: float, best: float, rtol: float = 1e-9) -> bool:
    """True when the value at the last admissible time matches the minimum.

    Energies that flatten out towards the scan horizon count as a minimum at
    the horizon even if rounding puts an earlier entry marginally lower.
    """
    return bool(last_value <= best + rtol * max(abs(best), np.finfo(float).tiny))


def conditioning_mask(diagonal: CovarianceDiagonal, upto: int) -> np.ndarray:
    """True for grid indices 1..upto whose rho(t,t) is too ill-conditioned to invert."""
    block = diagonal.values[1: upto + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(block)
    return ~np.isfinite(cond) | (cond > COND_LIMIT)


# ------------------------------------------------------------
# Energies
# ------------------------------------------------------------
def path_energy(model: DelayModel, mean: MeanPath, f: SampledPath) -> float:
    """Discretised rate functional of a path sampled on the mean's grid.

    Forward differences for g' with the drift at the left node, integrated
    with the trapezoid rule (the last node repeats the last residual).
    """
    require_valid(model, full_rank=True)
    if not f.grid.same_as(mean.grid):
        raise ParameterError("path and mean live on different grids")
    J = len(f.values) - 1
    if J < 1:
        raise ParameterError("path needs at least two grid points")
    N, dt = mean.grid.N, mean.grid.delta

    g = f.values - mean.values[: J + 1]
    delayed = np.zeros_like(g)
    if J + 1 > N:
        delayed[N:] = g[: J + 1 - N]

    slope = np.diff(g, axis=0) / dt
    drift = g[:-1] @ model.B.T + delayed[:-1] @ model.C.T
    residual = linalg.solve(model.Sigma, (slope - drift).T).T
    sq = np.sum(residual ** 2, axis=1)
    sq = np.append(sq, sq[-1])
    return 0.5 * float(integrate.trapezoid(sq, dx=dt))


def optimal_energy(mean: MeanPath, diag_T: np.ndarray, Q, T: float | None = None) -> float:
    """lambda(h^T) = 1/2 [rho(T,T)^-1 (Q - m(T))] . (Q - m(T))."""
    T = mean.grid.T if T is None else T
    j = mean.grid.index_of(T)
    check_conditioning(diag_T, T)
    gap = np.asarray(Q, dtype=float) - mean.values[j]
    return 0.5 * float(precision_solve(diag_T, gap) @ gap)


def optimal_path(mean: MeanPath, column: CovarianceColumn, diag_T: np.ndarray, Q) -> TransitionPath:
    """h^T(s) = m(s) + rho(s,T) [rho(T,T)^-1 (Q - m(T))] sampled on [0, T]."""
    T = column.t_fixed
    j = column.j_fixed
    if not column.grid.same_as(mean.grid):
        raise ParameterError("covariance column and mean live on different grids")
    Q = np.asarray(Q, dtype=float)
    energy = optimal_energy(mean, diag_T, Q, T)
    # the bridge uses the column's own rho(T,T) so that h^T(T) = Q exactly;
    # it differs from diag_T only by the O(delta) antisymmetric part
    weight = linalg.solve(column.values[j], Q - mean.values[j])
    values = mean.values[: j + 1] + column.values[: j + 1] @ weight
    return TransitionPath(SampledPath(mean.grid, values), energy, T, Q)


# ------------------------------------------------------------
# Scan over exit times
# ------------------------------------------------------------
def fixed_point_energy_curve(mean: MeanPath, diagonal: CovarianceDiagonal, Q,
                             T_large: float) -> EnergyCurve:
    """Energy of the optimal path to Q at every grid time t_j <= T_large.

    The interior argmin is T_opt (ties to the smaller T); a minimum at the
    right end of the scan is reported as T_opt = inf.
    """
    grid = mean.grid
    if not diagonal.grid.same_as(grid):
        raise ParameterError("covariance diagonal and mean live on different grids")
    upto = grid.last_index_at_or_before(T_large)
    if upto < 1:
        raise ParameterError(f"T_large={T_large:g} is below the first grid step")
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (mean.d,):
        raise ParameterError(f"target has shape {Q.shape}, expected ({mean.d},)")

    times = grid.points[1: upto + 1]
    excluded = conditioning_mask(diagonal, upto)
    gaps = Q[None, :] - mean.values[1: upto + 1]
    energies = np.full(upto, np.nan)
    ok = ~excluded
    if np.any(ok):
        weights = np.linalg.solve(diagonal.values[1: upto + 1][ok], gaps[ok][..., None])[..., 0]
        energies[ok] = 0.5 * np.einsum("ij,ij->i", weights, gaps[ok])

    notes = []
    if np.any(excluded):
        notes.append(f"{int(excluded.sum())} ill-conditioned exit times excluded")
        logger.warning("transition scan: %s", notes[-1])
    if not np.any(ok):
        return EnergyCurve(times, energies, excluded, math.nan, math.nan, notes)

    k = first_argmin(energies)
    energy_opt = float(energies[k])
    last_ok = int(np.flatnonzero(ok)[-1])
    if k == last_ok or reaches_horizon(energies[last_ok], energy_opt):
        T_opt = math.inf
        notes.append(f"energy minimum at the scan horizon T_large={T_large:g}")
    else:
        T_opt = float(times[k])
    logger.info("transition scan to %s: T_opt=%s energy=%.6g", Q, T_opt, energy_opt)
    return EnergyCurve(times, energies, excluded, T_opt, energy_opt, notes)


def transition_time_scan(model: DelayModel, mean: MeanPath, diagonal: CovarianceDiagonal, Q,
                         T_large: float) -> EnergyCurve:
    """fixed_point_energy_curve after checking the mean and diagonal belong to model."""
    require_valid(model)
    if mean.d != model.d or diagonal.values.shape[1:] != (model.d, model.d):
        raise ParameterError(
            f"mean and diagonal have shapes {mean.values.shape[1:]} and {diagonal.values.shape[1:]}, "
            f"model has dimension {model.d}"
        )
    return fixed_point_energy_curve(mean, diagonal, Q, T_large)
