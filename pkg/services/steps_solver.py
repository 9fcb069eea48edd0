"""
Method-of-steps solvers for the three delay ODE families of a linear delay SDE:

    m'(t)           = a + B m(t) + C m(t - tau)                 (mean)
    d/dt phi_s(t)   = phi_s(t) B* + phi_s(t - tau) C* + theta_s(t)
    F(s, t)         = phi_s(t) - Sigma* H(s - t)                (H(0) = 1)
    d/ds rho(s, t)  = B rho(s, t) + C rho(s - tau, t) + Sigma F(s, t)

Every family is advanced by backward Euler on Grid(N), interval after
interval, with the implicit matrix (I - delta B) factorised once per run.
The full rho(s, t) field is never stored: columns are solved on demand and
the diagonal rho(t, t) is streamed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from config.logging import logger
from services.delay_model import (
    DelayModel,
    HistoryPath,
    TimeGrid,
    eval_history,
    require_valid,
)
from utils.exceptions import ParameterError, StepSizeError

# Dense F tables beyond this many floats are refused (use the translation table)
DENSE_F_LIMIT = 50_000_000


# ------------------------------------------------------------
# Result types
# ------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class MeanPath:
    grid: TimeGrid
    values: np.ndarray  # (M + 1, d), values[0] = gamma(0)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def table(self):
        header = ["t"] + [f"m_{i + 1}" for i in range(self.d)]
        return header, np.column_stack([self.grid.points, self.values])


@dataclass(frozen=True, eq=False)
class FField:
    """F(s_i, t_j) on the grid.

    Stored either as the translation table kernel[u] = F(s, s + u*delta)
    (constant coefficients make F depend on t - s only) or, for small grids,
    densely as dense[i, j].
    """

    grid: TimeGrid
    kernel: np.ndarray | None = None  # (M + 1, d, d), kernel[0] = 0
    dense: np.ndarray | None = None  # (M + 1, M + 1, d, d)

    @property
    def method(self) -> str:
        return "translation" if self.kernel is not None else "direct"

    def value(self, i: int, j: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[i, j]
        if j <= i or j <= 0:
            return np.zeros_like(self.kernel[0])
        return self.kernel[j - i]

    def column(self, j: int) -> np.ndarray:
        """F(s_i, t_j) for every grid s_i, shape (M + 1, d, d)."""
        if self.dense is not None:
            return self.dense[:, j]
        out = np.zeros_like(self.kernel)
        if j > 0:
            # s_i < t_j  ->  kernel[j - i], i = 0..j-1
            out[:j] = self.kernel[j:0:-1]
        return out

    def row_tail(self, i: int, start: int) -> np.ndarray:
        """F(s_i, t_j) for j = start..M."""
        if self.dense is not None:
            return self.dense[i, start:]
        M = self.grid.M
        out = np.zeros((M + 1 - start,) + self.kernel.shape[1:])
        first = max(start, i + 1)
        if first <= M:
            out[first - start:] = self.kernel[first - i:M + 1 - i]
        return out


@dataclass(frozen=True, eq=False)
class CovarianceColumn:
    grid: TimeGrid
    t_fixed: float
    values: np.ndarray  # (M + 1, d, d), values[i] = rho(s_i, t_fixed)

    @property
    def j_fixed(self) -> int:
        return self.grid.index_of(self.t_fixed)

    def table(self):
        d = self.values.shape[1]
        header = ["s"] + [f"rho_{a + 1}{b + 1}" for a in range(d) for b in range(d)]
        flat = self.values.reshape(len(self.values), d * d)
        return header, np.column_stack([self.grid.points, flat])


@dataclass(frozen=True, eq=False)
class CovarianceDiagonal:
    grid: TimeGrid
    values: np.ndarray  # (M + 1, d, d), values[j] = rho(t_j, t_j)
    max_asymmetry: float = 0.0

    def at(self, t: float) -> np.ndarray:
        return self.values[self.grid.index_of(t)]

    def variances(self) -> np.ndarray:
        return np.diagonal(self.values, axis1=1, axis2=2)

    def table(self):
        d = self.values.shape[1]
        header = ["t"] + [f"rho_{a + 1}{b + 1}" for a in range(d) for b in range(d)]
        flat = self.values.reshape(len(self.values), d * d)
        return header, np.column_stack([self.grid.points, flat])


@dataclass(frozen=True, eq=False)
class EigenCurve:
    """Smallest eigenvalue of rho(t,t)^-1 per grid time, with its eigenvector."""

    grid: TimeGrid
    values: np.ndarray  # (M + 1,), nan at t = 0
    vectors: np.ndarray  # (M + 1, d)

    def table(self):
        d = self.vectors.shape[1]
        header = ["t", "lambda_min"] + [f"v_{i + 1}" for i in range(d)]
        return header, np.column_stack([self.grid.points, self.values, self.vectors])


# ------------------------------------------------------------
# Shared helpers
# ------------------------------------------------------------
def _check_grid(model: DelayModel, grid: TimeGrid) -> None:
    if not math.isclose(model.tau, grid.tau, rel_tol=1e-12):
        raise ParameterError(f"grid delay {grid.tau:g} differs from model delay {model.tau:g}")


def _implicit_inverse(B: np.ndarray, delta: float) -> np.ndarray:
    """(I - delta B)^-1 from a single LU factorisation."""
    d = B.shape[0]
    I = np.eye(d)
    step = I - delta * B
    cond = np.linalg.cond(step)
    if not np.isfinite(cond) or cond > 1e12:
        raise StepSizeError(
            f"I - delta*B is singular at delta={delta:g} (cond={cond:.3g}); use a smaller step"
        )
    lu = linalg.lu_factor(step)
    return linalg.lu_solve(lu, I)


def _delayed_history(history: HistoryPath, grid: TimeGrid) -> np.ndarray:
    """gamma(t_j - tau) for j = 0..N, i.e. history at times (j - N) * delta."""
    times = (np.arange(grid.N + 1) - grid.N) * grid.delta
    times[0] = -grid.tau
    return eval_history(history, times)


# ------------------------------------------------------------
# Mean
# ------------------------------------------------------------
def solve_mean(model: DelayModel, history: HistoryPath, grid: TimeGrid) -> MeanPath:
    """Backward Euler for the mean:

    m(t) = (I - dt B)^-1 m(t - dt) + dt (I - dt B)^-1 [a + C m(t - tau)]
    """
    require_valid(model, history)
    _check_grid(model, grid)
    N, M, dt = grid.N, grid.M, grid.delta
    A = _implicit_inverse(model.B, dt)
    past = _delayed_history(history, grid)

    values = np.empty((M + 1, model.d))
    values[0] = history.start
    for j in range(1, M + 1):
        delayed = past[j] if j <= N else values[j - N]
        values[j] = A @ (values[j - 1] + dt * (model.a + model.C @ delayed))

    logger.info("mean solved on %d grid points (delta=%g)", M, dt)
    return MeanPath(grid, values)


def solve_mean_analytic(model: DelayModel, history: HistoryPath, grid: TimeGrid) -> MeanPath:
    """Stepwise exponential solution of the mean, interval by interval:

    m_k(t) = e^{(t-k tau)B} m_{k-1}(k tau)
             + int_{k tau}^t e^{(t-u)B} (a + C m_{k-1}(u - tau)) du

    with exact matrix exponentials and the composite trapezoid rule on the
    grid nodes. Used as an independent oracle for solve_mean.
    """
    require_valid(model, history)
    _check_grid(model, grid)
    N, dt = grid.N, grid.delta
    _implicit_inverse(model.B, dt)
    E = linalg.expm(dt * model.B)
    past = _delayed_history(history, grid)

    values = np.empty((grid.M + 1, model.d))
    values[0] = history.start

    def forcing(j):
        delayed = past[j] if j <= N else values[j - N]
        return model.a + model.C @ delayed

    for k in range(grid.n_intervals):
        # J_k: nodes k*N .. (k+1)*N, left end already known from J_{k-1}
        f_prev = forcing(k * N)
        for j in range(k * N + 1, (k + 1) * N + 1):
            f_cur = forcing(j)
            values[j] = E @ values[j - 1] + 0.5 * dt * (E @ f_prev + f_cur)
            f_prev = f_cur

    logger.info("analytic mean solved over %d delay intervals", grid.n_intervals)
    return MeanPath(grid, values)


# ------------------------------------------------------------
# F(s, t)
# ------------------------------------------------------------
def solve_F(model: DelayModel, grid: TimeGrid, method: str = "translation") -> FField:
    """Solve the phi_s family and assemble F(s,t) = phi_s(t) - Sigma* H(s - t).

    method="direct" advances phi_s for every grid s jointly in t and stores F
    densely; method="translation" runs the same recursion once and stores the
    one-dimensional table F(s, s + u*delta), which the direct solve reproduces
    exactly for constant coefficients.
    """
    require_valid(model)
    _check_grid(model, grid)
    A = _implicit_inverse(model.B, grid.delta)
    R = A.T  # (I - delta B*)^-1
    if method == "translation":
        return FField(grid, kernel=_translation_kernel(model, grid, R))
    if method == "direct":
        return FField(grid, dense=_direct_F(model, grid, R))
    raise ParameterError(f"unknown F method {method!r}")


def _translation_kernel(model: DelayModel, grid: TimeGrid, R: np.ndarray) -> np.ndarray:
    N, M, dt = grid.N, grid.M, grid.delta
    d = model.d
    St = model.Sigma.T
    Ct = model.C.T
    kernel = np.zeros((M + 1, d, d))
    for u in range(1, M + 1):
        rhs = kernel[u - 1].copy()
        if u == 1:
            rhs += St
        if u > N:
            rhs += dt * kernel[u - N] @ Ct
        kernel[u] = rhs @ R
    logger.info("F translation table built (%d lags)", M)
    return kernel


def _direct_F(model: DelayModel, grid: TimeGrid, R: np.ndarray) -> np.ndarray:
    N, M, dt = grid.N, grid.M, grid.delta
    d = model.d
    if (M + 1) ** 2 * d * d > DENSE_F_LIMIT:
        raise ParameterError(
            f"direct F on M={M} needs {(M + 1) ** 2 * d * d} floats; use method='translation'"
        )
    St, Bt, Ct = model.Sigma.T, model.B.T, model.C.T
    s_idx = np.arange(M + 1)

    # phi[j] holds phi_s(t_j) for every s; phi_s = Sigma* on [-tau, 0]
    phi = np.empty((M + 1, M + 1, d, d))
    phi[0] = St
    for j in range(1, M + 1):
        delayed = phi[j - N] if j > N else np.broadcast_to(St, (M + 1, d, d))
        h_now = (s_idx >= j).astype(float)[:, None, None]
        h_lag = (s_idx - j + N >= 0).astype(float)[:, None, None]
        theta = -h_now * (St @ Bt) - h_lag * (St @ Ct)
        phi[j] = (phi[j - 1] + dt * (delayed @ Ct + theta)) @ R

    # F[i, j] = phi_{s_i}(t_j) - Sigma* H(i - j); F = 0 for t <= 0
    heaviside = (s_idx[:, None] >= s_idx[None, :]).astype(float)
    dense = np.transpose(phi, (1, 0, 2, 3)) - heaviside[:, :, None, None] * St
    dense[:, 0] = 0.0
    logger.info("F solved directly on a %dx%d grid", M + 1, M + 1)
    return dense


# ------------------------------------------------------------
# rho(s, t)
# ------------------------------------------------------------
def solve_covariance_column(model: DelayModel, F: FField, t_fixed: float) -> CovarianceColumn:
    """rho(., t_fixed) by the backward Euler recursion in s:

    rho(s,t) = A rho(s - ds, t) + ds A [C rho(s - tau, t) + Sigma F(s,t)],  A = (I - ds B)^-1
    """
    grid = F.grid
    _check_grid(model, grid)
    j = grid.index_of(t_fixed)
    N, M, ds = grid.N, grid.M, grid.delta
    A = _implicit_inverse(model.B, ds)
    forcing = model.Sigma @ F.column(j)  # (M + 1, d, d)

    values = np.zeros((M + 1, model.d, model.d))
    zero = values[0]
    for i in range(1, M + 1):
        delayed = values[i - N] if i > N else zero
        values[i] = A @ (values[i - 1] + ds * (model.C @ delayed + forcing[i]))
    return CovarianceColumn(grid, grid.time(j), values)


def solve_covariance_diagonal(model: DelayModel, F: FField, grid: TimeGrid | None = None) -> CovarianceDiagonal:
    """rho(t_j, t_j) for every grid time.

    All columns are advanced together in s; only the trailing delay window of
    rows (N + 1 rows of M + 1 columns) is kept, and columns left behind by the
    diagonal are dropped from the update. The backward Euler scheme leaves an
    O(delta) antisymmetric part on the diagonal; the symmetric part is
    returned and the largest antisymmetric norm recorded.
    """
    grid = grid or F.grid
    if not grid.same_as(F.grid):
        raise ParameterError("F was solved on a different grid")
    _check_grid(model, grid)
    N, M, ds = grid.N, grid.M, grid.delta
    d = model.d
    A = _implicit_inverse(model.B, ds)
    C, S = model.C, model.Sigma

    ring = np.zeros((N + 1, M + 1, d, d))
    diag = np.zeros((M + 1, d, d))
    for i in range(1, M + 1):
        prev = ring[(i - 1) % (N + 1), i:]
        delayed = ring[(i - N) % (N + 1), i:]  # zeros while i - N <= 0
        forcing = S @ F.row_tail(i, i)
        row = A @ (prev + ds * (C @ delayed + forcing))
        ring[i % (N + 1), i:] = row
        diag[i] = row[0]
        if i % (50 * N) == 0:
            logger.debug("covariance diagonal: %d / %d rows", i, M)

    asym = 0.5 * (diag - np.transpose(diag, (0, 2, 1)))
    norms = np.linalg.norm(diag, axis=(1, 2))
    rel = np.linalg.norm(asym, axis=(1, 2)) / np.where(norms > 0, norms, 1.0)
    sym = diag - asym
    logger.info("covariance diagonal solved on %d points (max relative asymmetry %.3g)",
                M, float(rel.max()))
    return CovarianceDiagonal(grid, sym, float(rel.max()))


def covariance_pair(model: DelayModel, F: FField, s: float, t: float) -> np.ndarray:
    """rho(s, t) at a pair of grid times, read from the column at t."""
    column = solve_covariance_column(model, F, t)
    return column.values[F.grid.index_of(s)]


def eigen_curve(diagonal: CovarianceDiagonal) -> EigenCurve:
    """Smallest eigenvalue of rho(t,t)^-1, computed as 1 / lambda_max(rho(t,t))."""
    w, v = np.linalg.eigh(diagonal.values)
    top = w[:, -1]
    values = np.full(top.shape, np.nan)
    positive = top > 0
    values[positive] = 1.0 / top[positive]
    vectors = v[:, :, -1].copy()
    # sign convention: last nonzero coordinate positive
    flip = vectors[:, -1] < 0
    vectors[flip] *= -1.0
    vectors[~positive] = np.nan
    return EigenCurve(diagonal.grid, values, vectors)
