"""
Linear noise approximation of nonlinear delay Langevin systems.

A nonlinear model dX = f(X_t, X_{t-tau}) dt + N^{-1/2} g(X_t, X_{t-tau}) dW is
linearised at a stationary state z (f(z, z) = 0):

    B = D1 f(z, z),  C = D2 f(z, z),  Sigma = g(z, z),  epsilon = 1/sqrt(N)

and the resulting DelayModel works in local coordinates xi = X - z.

Evaluators take states of shape (..., d) so that a whole ensemble of paths
can be pushed through them at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from config.logging import logger
from services.delay_model import DelayModel, HistoryPath, eval_history
from utils.exceptions import DomainError, ModelError, ParameterError

NEWTON_MAX_ITER = 200
RESIDUAL_TOL = 1e-10
DEDUPE_DIST = 1e-6
JACOBIAN_RTOL = 1e-6


@dataclass(frozen=True, eq=False)
class NonlinearDelayModel:
    """Drift f(x, x_delayed), diffusion g(x, x_delayed), delay and system size.

    `radicand` is set for chemical Langevin models whose diffusion is
    diag(sqrt(radicand)); the simulator then clamps negative radicands
    instead of failing. `jacobians` optionally returns closed-form
    (D1 f, D2 f) at a point.
    """

    d: int
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    tau: float
    system_size: float
    radicand: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    jacobians: Callable[[np.ndarray, np.ndarray], tuple] | None = None
    name: str = "custom"

    @property
    def epsilon(self) -> float:
        return 1.0 / math.sqrt(self.system_size)


@dataclass(frozen=True)
class ToggleParams:
    beta: float = 0.73
    k: float = 0.05
    gamma_dil: float = math.log(2.0)
    tau: float = 1.0
    N: float = 30.0

    def __post_init__(self):
        for name in ("beta", "k", "gamma_dil", "tau", "N"):
            value = getattr(self, name)
            if not value > 0:
                raise ParameterError(f"toggle parameter {name} must be > 0, got {value!r}")


@dataclass
class StationaryState:
    z: np.ndarray
    residual: float
    stability: str = "unknown"  # stable | saddle | unstable | unknown
    eigenvalues: np.ndarray | None = None
    flow_agrees: bool | None = None


@dataclass
class SeedFailure:
    seed: np.ndarray
    reason: str


# ------------------------------------------------------------
# Toggle switch
# ------------------------------------------------------------
def toggle_model(params: ToggleParams) -> NonlinearDelayModel:
    """Co-repressive toggle switch as a chemical Langevin equation.

    Each protein is produced at rate beta / (1 + p_delayed^2 / k) by repression
    from the other one and diluted at rate gamma_dil.
    """
    beta, k, gam = params.beta, params.k, params.gamma_dil

    def production(xd):
        xd = np.asarray(xd, dtype=float)
        # protein 1 is repressed by delayed protein 2 and vice versa
        return beta / (1.0 + xd[..., ::-1] ** 2 / k)

    def drift(x, xd):
        return production(xd) - gam * np.asarray(x, dtype=float)

    def radicand(x, xd):
        return production(xd) + gam * np.asarray(x, dtype=float)

    def diffusion(x, xd):
        r = radicand(x, xd)
        if np.any(r < 0):
            raise DomainError("negative propensity under the square root: state left the orthant")
        root = np.sqrt(r)
        return root[..., :, None] * np.eye(2)

    def jacobians(x, xd):
        xd = np.asarray(xd, dtype=float)
        v, w = xd[0], xd[1]
        D1 = -gam * np.eye(2)
        D2 = np.array([
            [0.0, -2.0 * beta * w / (k * (1.0 + w * w / k) ** 2)],
            [-2.0 * beta * v / (k * (1.0 + v * v / k) ** 2), 0.0],
        ])
        return D1, D2

    return NonlinearDelayModel(2, drift, diffusion, params.tau, params.N,
                               radicand=radicand, jacobians=jacobians, name="toggle")


def linear_as_nonlinear(model: DelayModel, system_size: float = 1.0) -> NonlinearDelayModel:
    """Wrap a linear DelayModel in the nonlinear interface."""
    a, B, C, Sigma = model.a, model.B, model.C, model.Sigma

    def drift(x, xd):
        return a + np.asarray(x) @ B.T + np.asarray(xd) @ C.T

    def diffusion(x, xd):
        shape = np.shape(x)[:-1] + Sigma.shape
        return np.broadcast_to(Sigma, shape)

    return NonlinearDelayModel(model.d, drift, diffusion, model.tau, system_size,
                               jacobians=lambda x, xd: (B.copy(), C.copy()), name="linear")


# ------------------------------------------------------------
# Finite differences
# ------------------------------------------------------------
def _step(z: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.linalg.norm(z)))


def _fd_jacobians(model: NonlinearDelayModel, x: np.ndarray, xd: np.ndarray):
    """Central differences for (D1 f, D2 f) at (x, xd)."""
    d = model.d
    h = _step(np.concatenate([x, xd]))
    D1 = np.empty((d, d))
    D2 = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        D1[:, i] = (model.drift(x + e, xd) - model.drift(x - e, xd)) / (2 * h)
        D2[:, i] = (model.drift(x, xd + e) - model.drift(x, xd - e)) / (2 * h)
    return D1, D2


def _residual(model: NonlinearDelayModel, z: np.ndarray) -> np.ndarray:
    return np.asarray(model.drift(z, z), dtype=float)


def _fd_total_jacobian(model: NonlinearDelayModel, z: np.ndarray) -> np.ndarray:
    h = _step(z)
    J = np.empty((model.d, model.d))
    for i in range(model.d):
        e = np.zeros(model.d)
        e[i] = h
        J[:, i] = (_residual(model, z + e) - _residual(model, z - e)) / (2 * h)
    return J


# ------------------------------------------------------------
# Stationary states
# ------------------------------------------------------------
def _newton(model: NonlinearDelayModel, seed: np.ndarray):
    """Damped Newton on z -> f(z, z) with step halving.

    Returns (z, residual); raises ValueError when the iteration stalls or
    leaves the domain of the drift.
    """
    z = np.array(seed, dtype=float)
    r = _residual(model, z)
    norm = float(np.linalg.norm(r))
    for it in range(NEWTON_MAX_ITER):
        if not np.isfinite(norm):
            raise ValueError("drift is not finite along the iteration")
        if norm <= RESIDUAL_TOL * (1.0 + np.linalg.norm(z)):
            logger.debug("newton from %s converged in %d iterations", seed, it)
            return z, norm
        J = _fd_total_jacobian(model, z)
        try:
            step = linalg.solve(J, -r)
        except linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]

        # backtrack: halve the step until the residual decreases
        lam = 1.0
        while lam > 1e-12:
            trial = z + lam * step
            r_trial = _residual(model, trial)
            n_trial = float(np.linalg.norm(r_trial))
            if np.isfinite(n_trial) and n_trial < norm:
                break
            lam *= 0.5
        else:
            raise ValueError(f"line search stalled at residual {norm:.3g}")
        z, r, norm = trial, r_trial, n_trial
    raise ValueError(f"no convergence in {NEWTON_MAX_ITER} iterations (residual {norm:.3g})")


def search_stationary_states(model: NonlinearDelayModel, seeds):
    """Roots of f(z, z) = 0 from every seed, with the seeds that failed."""
    states: list[StationaryState] = []
    failures: list[SeedFailure] = []
    for seed in np.atleast_2d(np.asarray(seeds, dtype=float)):
        try:
            z, res = _newton(model, seed)
        except (ValueError, DomainError, FloatingPointError) as exc:
            logger.warning("stationary search from %s failed: %s", seed, exc)
            failures.append(SeedFailure(seed, str(exc)))
            continue
        # post-hoc check, the loop may exit on a stalled line search
        if res > RESIDUAL_TOL * (1.0 + np.linalg.norm(z)):
            failures.append(SeedFailure(seed, f"residual {res:.3g} above tolerance"))
            continue
        if any(np.linalg.norm(z - s.z) <= DEDUPE_DIST for s in states):
            continue
        states.append(StationaryState(z, res))
    logger.info("stationary search: %d roots from %d seeds (%d failed)",
                len(states), len(np.atleast_2d(seeds)), len(failures))
    return states, failures


def find_stationary_states(model: NonlinearDelayModel, seeds) -> list[StationaryState]:
    states, _ = search_stationary_states(model, seeds)
    return states


def default_toggle_seeds(params: ToggleParams) -> np.ndarray:
    """Seeds on a coarse grid of the positive quadrant up to beta / gamma_dil."""
    top = params.beta / params.gamma_dil
    axis = np.linspace(0.0, 1.2 * top, 7)
    return np.array([[x, y] for x in axis for y in axis])


# ------------------------------------------------------------
# Linearisation
# ------------------------------------------------------------
def build_lna(model: NonlinearDelayModel, state) -> DelayModel:
    """Gaussian delay diffusion at a stationary state, in local coordinates."""
    z = np.asarray(state.z if isinstance(state, StationaryState) else state, dtype=float)
    try:
        B, C = _fd_jacobians(model, z, z)
        Sigma = np.asarray(model.diffusion(z, z), dtype=float)
    except (DomainError, FloatingPointError, ValueError) as exc:
        raise ModelError(f"linearisation at {z} failed: {exc}") from exc
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(C))):
        raise ModelError(f"non-finite Jacobian at {z}")

    if model.jacobians is not None:
        B_cf, C_cf = (np.asarray(J, dtype=float) for J in model.jacobians(z, z))
        for label, fd, cf in (("D1 f", B, B_cf), ("D2 f", C, C_cf)):
            gap = np.abs(fd - cf) / np.maximum(1.0, np.abs(cf))
            if np.max(gap) > JACOBIAN_RTOL:
                raise ModelError(
                    f"closed-form {label} disagrees with finite differences "
                    f"(max relative gap {np.max(gap):.3g})"
                )
        B, C = B_cf, C_cf

    lna = DelayModel(np.zeros(model.d), B, C, Sigma, model.tau, model.epsilon, origin=z)
    logger.info("LNA at %s: eps=%.4g", z, lna.epsilon)
    return lna


# ------------------------------------------------------------
# Deterministic flow and stability
# ------------------------------------------------------------
def deterministic_flow(model: NonlinearDelayModel, history: HistoryPath, T: float, dt: float):
    """Forward Euler for x' = f(x, x(t - tau)); dt must divide tau."""
    n_tau = round(model.tau / dt)
    if n_tau < 1 or abs(n_tau * dt - model.tau) > 1e-9 * model.tau:
        raise ParameterError(f"dt={dt:g} does not divide tau={model.tau:g}")
    steps = math.ceil(T / dt - 1e-9)
    past = eval_history(history, (np.arange(n_tau + 1) - n_tau) * dt)

    states = np.empty((steps + 1, model.d))
    states[0] = history.start
    for n in range(steps):
        delayed = past[n] if n < n_tau else states[n - n_tau]
        states[n + 1] = states[n] + dt * model.drift(states[n], delayed)
    return np.arange(steps + 1) * dt, states


def classify_stationary_state(model: NonlinearDelayModel, state: StationaryState,
                              horizon: float | None = None, kick: float = 1e-3) -> StationaryState:
    """Advisory classification from the eigenvalues of D1 f + D2 f.

    A deterministic run from a slightly perturbed constant history checks
    the verdict: a stable state pulls the perturbation back in.
    """
    lna = build_lna(model, state)
    eig = np.linalg.eigvals(lna.B + lna.C)
    re = eig.real
    if np.all(re < 0):
        verdict = "stable"
    elif np.all(re > 0):
        verdict = "unstable"
    elif np.any(re > 0):
        verdict = "saddle"
    else:
        verdict = "unknown"

    horizon = 20.0 * model.tau if horizon is None else horizon
    direction = np.linspace(1.0, -0.5, model.d)
    direction /= np.linalg.norm(direction)
    start = state.z + kick * direction
    history = HistoryPath(np.array([-model.tau, 0.0]), np.vstack([start, start]))
    _, states = deterministic_flow(model, history, horizon, model.tau / 100)
    returned = bool(np.linalg.norm(states[-1] - state.z) < kick)

    state.stability = verdict
    state.eigenvalues = eig
    state.flow_agrees = returned == (verdict == "stable")
    if not state.flow_agrees:
        logger.warning("state %s: eigenvalue verdict %r not confirmed by the deterministic flow",
                       state.z, verdict)
    return state
