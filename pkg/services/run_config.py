"""
TOML run configurations.

    schema = 1

    [model.toggle]            # or [model.linear] with a, B, C, Sigma, tau
    beta = 0.73
    k = 0.05
    tau = 1.0
    N = 30
    state = [0.0498, 1.0033]  # seed of the stationary state to linearise at

    [history]
    constant = [0.0453, 1.1323]
    coordinates = "absolute"

    [grid]
    N = 500
    T_large = 20.0

Bundled configs live in storage/.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from config.logging import logger
from services.delay_model import (
    DelayModel,
    HistoryPath,
    TimeGrid,
    build_grid,
    constant_history,
    history_from_samples,
)
from services.lna import (
    NonlinearDelayModel,
    StationaryState,
    ToggleParams,
    build_lna,
    find_stationary_states,
    toggle_model,
)
from services.montecarlo import SimulationConfig
from utils.exceptions import ConfigError, DelayLDError

BASE_DIR = os.path.dirname(os.path.dirname(__file__))
STORAGE_DIR = os.path.join(BASE_DIR, "storage")

SCHEMA_VERSION = 1
COORDINATES = ("absolute", "local")
COMMAND_BLOCKS = {
    "mean": ("grid",),
    "cov": ("grid",),
    "optimal-path": ("grid", "target"),
    "escape": ("grid", "disk"),
    "simulate": ("simulation",),
}


@dataclass(frozen=True)
class ToggleSpec:
    params: ToggleParams
    state: tuple | None = None


@dataclass(frozen=True, eq=False)
class LinearSpec:
    a: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma: np.ndarray
    tau: float
    epsilon: float = 1.0


@dataclass(frozen=True, eq=False)
class HistorySpec:
    constant: np.ndarray | None = None
    samples: np.ndarray | None = None
    coordinates: str = "absolute"


@dataclass(frozen=True)
class GridSpec:
    N: int
    T: float
    T_large: float | None = None


@dataclass(frozen=True, eq=False)
class TargetSpec:
    Q: np.ndarray
    T: float
    coordinates: str = "absolute"
    scan: bool = False


@dataclass(frozen=True, eq=False)
class DiskSpec:
    R: float
    delta_r: float
    center: np.ndarray | None = None  # None: the stationary state (local origin)
    half: str = "both"
    coordinates: str = "absolute"


@dataclass(frozen=True, eq=False)
class SimulationSpec:
    config: SimulationConfig
    dynamics: str = "lna"  # lna | cle (toggle only)
    moment_times: tuple = ()
    raw_paths: bool = False


@dataclass(frozen=True, eq=False)
class RunConfig:
    model: ToggleSpec | LinearSpec
    history: HistorySpec
    grid: GridSpec | None = None
    target: TargetSpec | None = None
    disk: DiskSpec | None = None
    simulation: SimulationSpec | None = None
    analytic_check: bool = False
    source: str | None = None
    raw: dict = field(default_factory=dict)

    def require(self, command: str) -> None:
        """Every block the command reads must be present."""
        for block in COMMAND_BLOCKS.get(command, ()):
            if getattr(self, block) is None:
                raise ConfigError(f"block required by '{command}' is missing", block)


@dataclass(frozen=True, eq=False)
class ResolvedRun:
    """Model, history and grid ready for the solvers (model coordinates)."""

    model: DelayModel
    history: HistoryPath
    grid: TimeGrid | None
    nonlinear: NonlinearDelayModel | None = None
    state: StationaryState | None = None
    absolute_history: HistoryPath | None = None

    def to_model_coordinates(self, x, coordinates: str) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.model.to_local(x) if coordinates == "absolute" else x


# ------------------------------------------------------------
# Field readers
# ------------------------------------------------------------
def _take(table: dict, key: str, path: str, default=...):
    if key in table:
        return table[key]
    if default is ...:
        raise ConfigError("required field is missing", f"{path}.{key}" if path else key)
    return default


def _number(table, key, path, default=..., positive=False) -> float:
    value = _take(table, key, path, default)
    if value is None:
        return None
    where = f"{path}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", where)
    if not math.isfinite(value) or (positive and value <= 0):
        raise ConfigError(f"must be a finite{' positive' if positive else ''} number, got {value!r}", where)
    return float(value)


def _integer(table, key, path, default=..., minimum=None) -> int:
    value = _take(table, key, path, default)
    where = f"{path}.{key}"
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", where)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", where)
    return value


def _array(table, key, path, ndim, default=...):
    value = _take(table, key, path, default)
    if value is None:
        return None
    where = f"{path}.{key}"
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a numeric array, got {value!r}", where)
    if arr.ndim != ndim or not np.all(np.isfinite(arr)):
        raise ConfigError(f"expected a finite {ndim}-d array", where)
    return arr


def _choice(table, key, path, choices, default):
    value = _take(table, key, path, default)
    if value not in choices:
        raise ConfigError(f"must be one of {choices}, got {value!r}", f"{path}.{key}")
    return value


# ------------------------------------------------------------
# Blocks
# ------------------------------------------------------------
def _parse_model(raw: dict):
    model = _take(raw, "model", "")
    sources = [k for k in ("toggle", "linear") if k in model]
    if len(sources) != 1:
        raise ConfigError("exactly one of [model.toggle] or [model.linear] is required", "model")

    if sources[0] == "toggle":
        t = model["toggle"]
        p = "model.toggle"
        params = ToggleParams(
            beta=_number(t, "beta", p, 0.73, positive=True),
            k=_number(t, "k", p, 0.05, positive=True),
            gamma_dil=_number(t, "gamma", p, math.log(2.0), positive=True),
            tau=_number(t, "tau", p, positive=True),
            N=_number(t, "N", p, 30.0, positive=True),
        )
        state = _array(t, "state", p, 1, None)
        if state is not None and state.shape != (2,):
            raise ConfigError("expected two coordinates", f"{p}.state")
        return ToggleSpec(params, None if state is None else tuple(state))

    lin = model["linear"]
    p = "model.linear"
    a = _array(lin, "a", p, 1)
    spec = LinearSpec(
        a=a,
        B=_array(lin, "B", p, 2),
        C=_array(lin, "C", p, 2),
        Sigma=_array(lin, "Sigma", p, 2),
        tau=_number(lin, "tau", p, positive=True),
        epsilon=_number(lin, "epsilon", p, 1.0),
    )
    for name in ("B", "C", "Sigma"):
        if getattr(spec, name).shape != (len(a), len(a)):
            raise ConfigError(f"expected shape ({len(a)}, {len(a)})", f"{p}.{name}")
    return spec


def _parse_history(raw: dict, is_toggle: bool) -> HistorySpec:
    h = _take(raw, "history", "")
    constant = _array(h, "constant", "history", 1, None)
    samples = _array(h, "samples", "history", 2, None)
    if (constant is None) == (samples is None):
        raise ConfigError("give exactly one of history.constant or history.samples", "history")
    coordinates = _choice(h, "coordinates", "history", COORDINATES,
                          "absolute" if is_toggle else "local")
    return HistorySpec(constant, samples, coordinates)


def _parse_grid(raw: dict) -> GridSpec | None:
    g = raw.get("grid")
    if g is None:
        return None
    T_large = _number(g, "T_large", "grid", None, positive=True)
    T = _number(g, "T", "grid", T_large, positive=True)
    if T is None:
        raise ConfigError("required field is missing (or give grid.T_large)", "grid.T")
    if T_large is not None and T_large > T:
        raise ConfigError(f"T_large={T_large:g} exceeds the grid horizon T={T:g}", "grid.T_large")
    return GridSpec(_integer(g, "N", "grid", minimum=2), T, T_large)


def _parse_target(raw: dict, default_coords: str) -> TargetSpec | None:
    t = raw.get("target")
    if t is None:
        return None
    return TargetSpec(
        Q=_array(t, "Q", "target", 1),
        T=_number(t, "T", "target", positive=True),
        coordinates=_choice(t, "coordinates", "target", COORDINATES, default_coords),
        scan=bool(_take(t, "scan", "target", False)),
    )


def _parse_disk(raw: dict, default_coords: str) -> DiskSpec | None:
    d = raw.get("disk")
    if d is None:
        return None
    return DiskSpec(
        R=_number(d, "R", "disk", positive=True),
        delta_r=_number(d, "delta_r", "disk", positive=True),
        center=_array(d, "center", "disk", 1, None),
        half=_choice(d, "half", "disk", ("both", "upper", "lower"), "both"),
        coordinates=_choice(d, "coordinates", "disk", COORDINATES, default_coords),
    )


def _parse_simulation(raw: dict, is_toggle: bool) -> SimulationSpec | None:
    s = raw.get("simulation")
    if s is None:
        return None
    p = "simulation"
    permutation = _take(s, "noise_permutation", p, None)
    config = SimulationConfig(
        dt=_number(s, "dt", p, positive=True),
        T_sim=_number(s, "T", p, positive=True),
        n_paths=_integer(s, "n_paths", p, minimum=1),
        seed=_integer(s, "seed", p, 0, minimum=0),
        epsilon=_number(s, "epsilon", p, None),
        record_stride=_integer(s, "record_stride", p, 1, minimum=1),
        keep_noise=bool(_take(s, "keep_noise", p, False)),
        noise_permutation=None if permutation is None else tuple(permutation),
    )
    dynamics = _choice(s, "dynamics", p, ("lna", "cle") if is_toggle else ("lna",), "lna")
    times = _array(s, "moment_times", p, 1, np.array([]))
    return SimulationSpec(config, dynamics, tuple(float(t) for t in times),
                          bool(_take(s, "raw_paths", p, False)))


# ------------------------------------------------------------
# Loading
# ------------------------------------------------------------
def parse_config(raw: dict, source: str | None = None) -> RunConfig:
    schema = _take(raw, "schema", "")
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {schema!r}, expected {SCHEMA_VERSION}", "schema")
    try:
        model = _parse_model(raw)
    except ConfigError:
        raise
    except DelayLDError as exc:
        raise ConfigError(str(exc), "model") from exc
    is_toggle = isinstance(model, ToggleSpec)
    history = _parse_history(raw, is_toggle)
    coords = history.coordinates
    return RunConfig(
        model=model,
        history=history,
        grid=_parse_grid(raw),
        target=_parse_target(raw, coords),
        disk=_parse_disk(raw, coords),
        simulation=_parse_simulation(raw, is_toggle),
        analytic_check=bool(raw.get("mean", {}).get("analytic_check", False)),
        source=source,
        raw=raw,
    )


def load_config(path: str) -> RunConfig:
    """Read and validate a run configuration file."""
    if not os.path.exists(path):
        bundled = os.path.join(STORAGE_DIR, path)
        if not os.path.exists(bundled):
            raise ConfigError(f"no such config file: {path}")
        path = bundled
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc
    logger.info("loaded run config %s", path)
    return parse_config(raw, path)


# ------------------------------------------------------------
# Resolution
# ------------------------------------------------------------
def _absolute_history(spec: HistorySpec, tau: float) -> HistoryPath:
    if spec.constant is not None:
        return constant_history(tau, spec.constant)
    samples = spec.samples
    if samples.shape[1] < 2:
        raise ConfigError("each sample needs a time and at least one coordinate", "history.samples")
    return history_from_samples(samples[:, 0], samples[:, 1:], tau)


def _shift(history: HistoryPath, offset: np.ndarray) -> HistoryPath:
    return HistoryPath(history.times, history.states - offset[None, :])


def resolve(config: RunConfig) -> ResolvedRun:
    """Build the DelayModel (an LNA for the toggle), history and grid."""
    spec = config.model
    tau = spec.params.tau if isinstance(spec, ToggleSpec) else spec.tau
    try:
        history = _absolute_history(config.history, tau)
    except ConfigError:
        raise
    except DelayLDError as exc:
        raise ConfigError(str(exc), "history") from exc

    grid = None
    if config.grid is not None:
        grid = build_grid(tau, config.grid.T, config.grid.N)

    if isinstance(spec, LinearSpec):
        model = DelayModel(spec.a, spec.B, spec.C, spec.Sigma, spec.tau, spec.epsilon)
        return ResolvedRun(model, history, grid)

    nonlinear = toggle_model(spec.params)
    # history given in local coordinates needs the state before it can be placed
    if config.history.coordinates == "local" and spec.state is None:
        raise ConfigError("local history coordinates need model.toggle.state", "model.toggle.state")
    seed = np.array(spec.state) if spec.state is not None else history.start
    states = find_stationary_states(nonlinear, [seed])
    if not states:
        raise ConfigError(f"no stationary state found from {seed}", "model.toggle.state")
    state = states[0]
    lna = build_lna(nonlinear, state)

    if config.history.coordinates == "absolute":
        absolute, local = history, _shift(history, state.z)
    else:
        absolute, local = _shift(history, -state.z), history
    logger.info("toggle LNA at %s, local history starts at %s", state.z, local.start)
    return ResolvedRun(lna, local, grid, nonlinear, state, absolute)
