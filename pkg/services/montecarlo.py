"""
Euler-Maruyama ensembles for linear and nonlinear delay SDEs.

    Y_{n+1} = Y_n + drift(Y_n, Y_{n - N_em}) dt + eps * G(Y_n, Y_{n - N_em}) dW_n

with dt = tau / N_em so that delayed values are exact look-ups. Every path
draws from its own counter-based stream keyed by (seed, path index), so an
ensemble does not depend on the chunking or on the number of threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config import settings
from config.logging import logger
from services.delay_model import DelayModel, HistoryPath, eval_history, history_from_samples, require_valid
from services.lna import NonlinearDelayModel
from utils.exceptions import ConfigError, EstimationError, ParameterError, SimulationError


@dataclass(frozen=True)
class SimulationConfig:
    dt: float
    T_sim: float
    n_paths: int
    seed: int = 0
    epsilon: float | None = None  # None: the model's own noise scale
    record_stride: int = 1
    keep_noise: bool = False
    chunk_size: int = 64
    noise_permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"simulation dt must be > 0, got {self.dt!r}")
        if not self.T_sim > 0:
            raise ConfigError(f"simulation horizon must be > 0, got {self.T_sim!r}")
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ConfigError(f"n_paths must be a positive integer, got {self.n_paths!r}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ConfigError(f"record_stride must be a positive integer, got {self.record_stride!r}")
        if self.epsilon is not None and not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon!r}")

    def steps_per_delay(self, tau: float) -> int:
        n = round(tau / self.dt)
        if n < 1 or abs(n * self.dt - tau) > 1e-9 * tau:
            raise ConfigError(f"dt={self.dt:g} does not divide tau={tau:g}")
        return n

    @property
    def n_steps(self) -> int:
        return math.ceil(self.T_sim / self.dt - 1e-9)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    times: np.ndarray  # recorded times, every record_stride steps
    states: np.ndarray  # (n_paths, n_times, d)
    config: SimulationConfig
    epsilon: float
    failed: np.ndarray  # (n_paths,) non-finite values along the path
    clamp_count: int = 0
    noise: np.ndarray | None = None  # Brownian paths W at the recorded times
    warnings: list[str] = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def index_of(self, t: float) -> int:
        step = self.times[1] - self.times[0] if len(self.times) > 1 else self.config.dt
        i = round(t / step)
        if i < 0 or i >= len(self.times) or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ParameterError(f"t={t!r} is not a recorded simulation time")
        return i

    def at(self, t: float) -> np.ndarray:
        return self.states[:, self.index_of(t)]


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    s: float
    t: float
    mean: np.ndarray  # E X_t
    mean_se: np.ndarray
    cov: np.ndarray  # Cov(X_s, X_t)
    cov_se: np.ndarray
    n_used: int


@dataclass(frozen=True, eq=False)
class ExitStatistics:
    exit_times: np.ndarray  # nan for paths that stay inside
    exit_points: np.ndarray
    exited: np.ndarray
    n_valid: int

    @property
    def fraction(self) -> float:
        return float(self.exited.sum()) / self.n_valid if self.n_valid else math.nan

    def angles(self, center) -> np.ndarray:
        """Polar angle (degrees) of each exit point around `center`."""
        rel = self.exit_points - np.asarray(center, dtype=float)
        return np.degrees(np.arctan2(rel[:, 1], rel[:, 0]))

    def table(self):
        d = self.exit_points.shape[1]
        header = ["path", "exited", "t_exit"] + [f"x_{i + 1}" for i in range(d)]
        rows = np.column_stack([np.arange(len(self.exited)), self.exited.astype(float),
                                self.exit_times, self.exit_points])
        return header, rows


# ------------------------------------------------------------
# Random streams
# ------------------------------------------------------------
def path_generator(seed: int, index: int) -> np.random.Generator:
    """Philox stream keyed by (seed, path index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def _increments(config: SimulationConfig, paths: range, m: int) -> np.ndarray:
    """Standard normal increments scaled by sqrt(dt): (n_chunk, n_steps, m)."""
    scale = math.sqrt(config.dt)
    draws = np.stack([path_generator(config.seed, i).standard_normal((config.n_steps, m))
                      for i in paths])
    if config.noise_permutation is not None:
        draws = draws[..., list(config.noise_permutation)]
    return scale * draws


# ------------------------------------------------------------
# Core loop
# ------------------------------------------------------------
def _run_chunk(paths: range, config: SimulationConfig, past: np.ndarray, n_tau: int,
               step, m: int):
    """Simulate one chunk of paths; `step(x, xd, dW)` returns the increment and clamp count."""
    P = len(paths)
    d = past.shape[1]
    n_steps, stride = config.n_steps, config.record_stride
    n_rec = n_steps // stride + 1
    dW = _increments(config, paths, m)

    # ring of the last n_tau + 1 states; step n lives in slot (n + n_tau) % L
    L = n_tau + 1
    ring = np.broadcast_to(past[:, None, :], (L, P, d)).copy()
    states = np.empty((P, n_rec, d))
    states[:, 0] = past[-1]
    noise = np.zeros((P, n_rec, m)) if config.keep_noise else None
    W = np.zeros((P, m))
    clamps = 0

    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            x = ring[(n + n_tau) % L]
            xd = ring[n % L]
            inc, c = step(x, xd, dW[:, n])
            clamps += c
            new = x + inc
            ring[n % L] = new
            if noise is not None:
                W = W + dW[:, n]
            if (n + 1) % stride == 0:
                r = (n + 1) // stride
                states[:, r] = new
                if noise is not None:
                    noise[:, r] = W
    return states, noise, clamps


def _simulate(d: int, m: int, history: HistoryPath, tau: float, config: SimulationConfig,
              step, epsilon: float, threads: int | None) -> PathEnsemble:
    n_tau = config.steps_per_delay(tau)
    # history at t = (j - n_tau) dt for j = 0..n_tau
    past = eval_history(history, (np.arange(n_tau + 1) - n_tau) * config.dt)

    chunks = [range(lo, min(lo + config.chunk_size, config.n_paths))
              for lo in range(0, config.n_paths, config.chunk_size)]
    threads = settings.THREADS if threads is None else threads

    def run(paths):
        return _run_chunk(paths, config, past, n_tau, step, m)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    states = np.concatenate([r[0] for r in results])
    noise = np.concatenate([r[1] for r in results]) if config.keep_noise else None
    clamps = sum(r[2] for r in results)
    times = np.arange(states.shape[1]) * config.dt * config.record_stride
    failed = ~np.all(np.isfinite(states), axis=(1, 2))

    warnings = []
    if clamps:
        warnings.append(f"{clamps} negative diffusion radicands clamped to zero")
        logger.warning("simulation: %s", warnings[-1])
    if np.any(failed):
        warnings.append(f"{int(failed.sum())} of {config.n_paths} paths diverged")
        logger.warning("simulation: %s", warnings[-1])
        if np.all(failed):
            raise SimulationError("every simulated path diverged")
    logger.info("simulated %d paths x %d steps (dt=%g, eps=%g, %d chunks)",
                config.n_paths, config.n_steps, config.dt, epsilon, len(chunks))
    return PathEnsemble(times, states, config, epsilon, failed, clamps, noise, warnings)


def simulate_linear(model: DelayModel, history: HistoryPath, config: SimulationConfig,
                    threads: int | None = None) -> PathEnsemble:
    require_valid(model, history)
    eps = model.epsilon if config.epsilon is None else config.epsilon
    a, Bt, Ct, St = model.a, model.B.T, model.C.T, eps * model.Sigma.T
    dt = config.dt

    def step(x, xd, dW):
        return (a + x @ Bt + xd @ Ct) * dt + dW @ St, 0

    return _simulate(model.d, model.Sigma.shape[1], history, model.tau, config, step, eps, threads)


def simulate_nonlinear(model: NonlinearDelayModel, history: HistoryPath, config: SimulationConfig,
                       threads: int | None = None) -> PathEnsemble:
    if history.d != model.d:
        raise ParameterError(f"history has dimension {history.d}, model has {model.d}")
    eps = model.epsilon if config.epsilon is None else config.epsilon
    dt = config.dt

    if model.radicand is not None:
        m = model.d

        def step(x, xd, dW):
            r = model.radicand(x, xd)
            negative = int(np.count_nonzero(r < 0))
            return model.drift(x, xd) * dt + eps * np.sqrt(np.maximum(r, 0.0)) * dW, negative
    else:
        m = np.shape(model.diffusion(history.start, history.start))[-1]

        def step(x, xd, dW):
            G = model.diffusion(x, xd)
            return model.drift(x, xd) * dt + eps * np.einsum("pij,pj->pi", G, dW), 0

    return _simulate(model.d, m, history, model.tau, config, step, eps, threads)


# ------------------------------------------------------------
# Statistics
# ------------------------------------------------------------
def estimate_moments(ensemble: PathEnsemble, times, pairs=None) -> list[MomentEstimate]:
    """Sample means and covariances Cov(X_s, X_t) with standard errors.

    Without `pairs` the covariance is taken at equal times (s = t).
    """
    ok = ~ensemble.failed
    n = int(ok.sum())
    if n < 2:
        raise EstimationError(f"need at least 2 valid paths for moments, have {n}")
    pairs = [(t, t) for t in times] if pairs is None else list(pairs)

    estimates = []
    for s, t in pairs:
        xs = ensemble.at(s)[ok]
        xt = ensemble.at(t)[ok]
        cs = xs - xs.mean(axis=0)
        ct = xt - xt.mean(axis=0)
        products = cs[:, :, None] * ct[:, None, :]
        cov = products.sum(axis=0) / (n - 1)
        estimates.append(MomentEstimate(
            s, t,
            xt.mean(axis=0), xt.std(axis=0, ddof=1) / math.sqrt(n),
            cov, products.std(axis=0, ddof=1) / math.sqrt(n),
            n,
        ))
    return estimates


def moments_table(estimates: list[MomentEstimate]):
    d = estimates[0].mean.shape[0]
    header = ["s", "t"]
    header += [f"m_{i + 1}" for i in range(d)] + [f"se_m_{i + 1}" for i in range(d)]
    header += [f"rho_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    header += [f"se_rho_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    rows = [np.concatenate([[e.s, e.t], e.mean, e.mean_se, e.cov.ravel(), e.cov_se.ravel()])
            for e in estimates]
    return header, np.array(rows)


def exit_statistics(ensemble: PathEnsemble, center, radius: float) -> ExitStatistics:
    """First crossing of the circle |x - center| = radius on the recorded grid.

    The crossing between the two straddling records is found by linear
    interpolation of the distance to the centre.
    """
    if radius < 0:
        raise ParameterError(f"radius must be >= 0, got {radius!r}")
    center = np.asarray(center, dtype=float)
    P, _, d = ensemble.states.shape
    dist = np.linalg.norm(ensemble.states - center, axis=2)
    valid = ~ensemble.failed

    exit_times = np.full(P, np.nan)
    exit_points = np.full((P, d), np.nan)
    outside = (dist >= radius) & valid[:, None]
    exited = np.any(outside, axis=1)
    for p in np.flatnonzero(exited):
        n = int(np.argmax(outside[p]))
        if n == 0:
            exit_times[p] = ensemble.times[0]
            exit_points[p] = ensemble.states[p, 0]
            continue
        r0, r1 = dist[p, n - 1], dist[p, n]
        theta = (radius - r0) / (r1 - r0) if r1 > r0 else 1.0
        t0, t1 = ensemble.times[n - 1], ensemble.times[n]
        exit_times[p] = t0 + theta * (t1 - t0)
        exit_points[p] = ensemble.states[p, n - 1] + theta * (ensemble.states[p, n] - ensemble.states[p, n - 1])

    stats = ExitStatistics(exit_times, exit_points, exited, int(valid.sum()))
    logger.info("exit statistics: %d of %d paths left the disk (r=%g)",
                int(exited.sum()), stats.n_valid, radius)
    return stats


def tube_probability(ensemble: PathEnsemble, reference, radius: float) -> float:
    """Fraction of paths within sup-distance `radius` of `reference`.

    `reference` is sampled on the first len(reference) recorded times.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim == 1:
        reference = reference[:, None]
    K = reference.shape[0]
    if K > ensemble.states.shape[1]:
        raise ParameterError("reference path is longer than the simulated paths")
    if math.isinf(radius):
        return 1.0
    ok = ~ensemble.failed
    gaps = np.linalg.norm(ensemble.states[ok, :K] - reference[None], axis=2)
    inside = np.max(gaps, axis=1) <= radius
    return float(inside.mean()) if len(inside) else math.nan


def segment_history(ensemble: PathEnsemble, path_index: int, t_end: float, tau: float) -> HistoryPath:
    """Slice [t_end - tau, t_end] of one simulated path as an initial history."""
    hi = ensemble.index_of(t_end)
    lo = ensemble.index_of(t_end - tau)
    return history_from_samples(ensemble.times[lo: hi + 1],
                                ensemble.states[path_index, lo: hi + 1], tau)
