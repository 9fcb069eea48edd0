"""
Linear delay SDE model, initial histories and the shared computational grid.

The model is

    dX_t = (a + B X_t + C X_{t - tau}) dt + epsilon * Sigma dW_t,
    X_t = gamma(t) on [-tau, 0].

Every solver in the package works on a TimeGrid with N steps per delay
interval, so that the boundaries k*tau of the method-of-steps intervals are
grid nodes and delayed values are exact look-ups N indices back.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from config.logging import logger
from config.settings import RANK_TOL
from utils.exceptions import DomainError, ModelError, ParameterError, RankError


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


# ------------------------------------------------------------
# Model
# ------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DelayModel:
    """Coefficients (a, B, C, Sigma, tau, epsilon) of a linear delay SDE.

    `origin` is set when the model is a linearisation around a stationary
    state: model coordinates are then local (state minus origin).
    """

    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma: np.ndarray
    tau: float
    epsilon: float = 1.0
    origin: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen(self.a, 1))
        object.__setattr__(self, "B", _frozen(self.B, 2))
        object.__setattr__(self, "C", _frozen(self.C, 2))
        object.__setattr__(self, "Sigma", _frozen(self.Sigma, 2))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if self.origin is not None:
            object.__setattr__(self, "origin", _frozen(self.origin, 1))

    @property
    def d(self) -> int:
        return self.a.shape[0]

    def sigma_singular_values(self) -> np.ndarray:
        if self.Sigma.size == 0:
            return np.zeros(0)
        return np.linalg.svd(self.Sigma, compute_uv=False)

    def is_full_rank(self) -> bool:
        sv = self.sigma_singular_values()
        if sv.size < self.d or sv[0] == 0.0:
            return False
        return bool(sv[-1] > RANK_TOL * sv[0])

    def centered(self) -> "DelayModel":
        """The model of the centred process Z: no offset, unit noise scale."""
        return DelayModel(np.zeros(self.d), self.B, self.C, self.Sigma,
                          self.tau, 1.0, self.origin)

    def with_epsilon(self, epsilon: float) -> "DelayModel":
        return DelayModel(self.a, self.B, self.C, self.Sigma, self.tau,
                          epsilon, self.origin)

    def to_local(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        return state if self.origin is None else state - self.origin

    def to_absolute(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        return state if self.origin is None else state + self.origin


# ------------------------------------------------------------
# History
# ------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class HistoryPath:
    """Piecewise-linear initial history sampled on [-tau, 0]."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times, 1)
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        states.setflags(write=False)
        if states.shape[0] != times.shape[0]:
            raise ParameterError(
                f"history has {times.shape[0]} times but {states.shape[0]} states"
            )
        if times.shape[0] < 2 or np.any(np.diff(times) <= 0):
            raise ParameterError("history times must be strictly increasing (at least 2 samples)")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def start(self) -> np.ndarray:
        """gamma(0), the start point p of the process."""
        return self.states[-1].copy()

    def __call__(self, t):
        return eval_history(self, t)


def constant_history(tau: float, state) -> HistoryPath:
    state = np.atleast_1d(np.asarray(state, dtype=float))
    return HistoryPath(np.array([-tau, 0.0]), np.vstack([state, state]))


def history_from_samples(times, states, tau: float | None = None) -> HistoryPath:
    """Build a history from a trajectory segment.

    When `tau` is given the segment times are shifted so that the last sample
    sits at t = 0; the segment must then span exactly tau.
    """
    times = np.asarray(times, dtype=float)
    if tau is not None:
        times = times - times[-1]
        if not math.isclose(times[0], -tau, rel_tol=0.0, abs_tol=1e-9 * max(tau, 1.0)):
            raise ParameterError(
                f"segment spans {-times[0]:.6g} time units, expected tau={tau:.6g}"
            )
        times = times.copy()
        times[0] = -tau
    return HistoryPath(times, states)


def eval_history(history: HistoryPath, t):
    """Piecewise-linear value of the history at t (scalar or array) in [-tau, 0]."""
    t_arr = np.asarray(t, dtype=float)
    lo, hi = history.times[0], history.times[-1]
    tol = 1e-12 * max(1.0, abs(lo))
    if np.any(t_arr < lo - tol) or np.any(t_arr > hi + tol):
        raise DomainError(f"history evaluated outside [{lo:g}, {hi:g}]")
    t_clip = np.clip(t_arr, lo, hi)
    cols = [np.interp(t_clip, history.times, history.states[:, i]) for i in range(history.d)]
    return np.stack(cols, axis=-1)


# ------------------------------------------------------------
# Grid
# ------------------------------------------------------------
@dataclass(frozen=True)
class TimeGrid:
    """Grid(N): t_j = j*tau/N for j = 0..M with M = N * (1 + floor(T/tau)).

    Index 0 (t = 0) is stored in addition to the nodes j = 1..M.
    """

    tau: float
    N: int
    T: float

    @property
    def delta(self) -> float:
        return self.tau / self.N

    @property
    def n_intervals(self) -> int:
        return 1 + math.floor(self.T / self.tau + 1e-12)

    @property
    def M(self) -> int:
        return self.N * self.n_intervals

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.delta

    def time(self, j: int) -> float:
        return j * self.delta

    def index_of(self, t: float) -> int:
        """Grid index of t; raises ParameterError if t is not a grid node."""
        j = round(t / self.delta)
        if j < 0 or j > self.M or abs(j * self.delta - t) > 1e-9 * max(self.delta, abs(t)):
            raise ParameterError(f"t={t!r} is not a node of the grid (delta={self.delta:g})")
        return j

    def last_index_at_or_before(self, t: float) -> int:
        j = math.floor(t / self.delta + 1e-9)
        return min(max(j, 0), self.M)

    def interval_of(self, j: int) -> int:
        """Method-of-steps interval J_k = [k tau, (k+1) tau] containing node j >= 1."""
        return (j - 1) // self.N

    def same_as(self, other: "TimeGrid") -> bool:
        return (self.N == other.N and math.isclose(self.tau, other.tau)
                and self.M == other.M)


def build_grid(tau: float, T: float, N: int) -> TimeGrid:
    if tau <= 0:
        raise ParameterError(f"delay tau must be > 0, got {tau!r}")
    if T <= 0:
        raise ParameterError(f"horizon T must be > 0, got {T!r}")
    if int(N) != N or N < 2:
        raise ParameterError(f"N must be an integer >= 2, got {N!r}")
    grid = TimeGrid(float(tau), int(N), float(T))
    logger.debug("grid tau=%g T=%g N=%d -> M=%d delta=%g", tau, T, N, grid.M, grid.delta)
    return grid


# ------------------------------------------------------------
# Validation
# ------------------------------------------------------------
@dataclass
class ValidationReport:
    dimension: int | None
    errors: list[str] = field(default_factory=list)
    full_rank: bool = False
    sigma_min: float = 0.0
    sigma_max: float = 0.0
    history_covers: bool = False

    @property
    def valid(self) -> bool:
        return not self.errors


def validate_model(model: DelayModel, history: HistoryPath | None = None) -> ValidationReport:
    """Diagnose a model/history pair without raising."""
    d = model.a.shape[0] if model.a.ndim == 1 else None
    report = ValidationReport(dimension=d)

    if d is None or d == 0:
        report.errors.append("drift offset a must be a non-empty vector")
    else:
        for name in ("B", "C", "Sigma"):
            shape = getattr(model, name).shape
            if shape != (d, d):
                report.errors.append(f"{name} has shape {shape}, expected ({d}, {d})")
    if not model.tau > 0:
        report.errors.append(f"tau must be > 0, got {model.tau!r}")
    if not model.epsilon >= 0:
        report.errors.append(f"epsilon must be >= 0, got {model.epsilon!r}")

    if model.Sigma.ndim == 2 and model.Sigma.size and np.all(np.isfinite(model.Sigma)):
        sv = np.linalg.svd(model.Sigma, compute_uv=False)
        report.sigma_max = float(sv[0])
        report.sigma_min = float(sv[-1]) if d is not None and sv.size >= d else 0.0
        report.full_rank = bool(
            d is not None and sv.size >= d and sv[0] > 0 and sv[-1] > RANK_TOL * sv[0]
        )

    if history is not None:
        tol = 1e-9 * max(1.0, abs(model.tau))
        covers = (abs(history.times[0] + model.tau) <= tol
                  and abs(history.times[-1]) <= tol)
        report.history_covers = covers
        if not covers:
            report.errors.append(
                f"history covers [{history.times[0]:g}, {history.times[-1]:g}], "
                f"expected [{-model.tau:g}, 0]"
            )
        if d is not None and history.d != d:
            report.errors.append(f"history has dimension {history.d}, model has {d}")

    return report


def require_valid(model: DelayModel, history: HistoryPath | None = None,
                  full_rank: bool = False) -> None:
    """Raise ModelError (or RankError) if the model cannot be used downstream."""
    report = validate_model(model, history)
    if not report.valid:
        raise ModelError("; ".join(report.errors))
    if full_rank and not report.full_rank:
        raise RankError(
            f"Sigma is not full rank (smallest singular value {report.sigma_min:.3g}, "
            f"largest {report.sigma_max:.3g})"
        )
