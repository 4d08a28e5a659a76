"""Observation time grids, the plug-in model interface, and seeded streams.

A model here is a coupled partially observed Markov process over U units:
a latent state matrix evolves jointly under the full coupled dynamics,
while measurements are conditionally independent across units and times.
Everything is vectorized over a leading particle axis, so state arrays are
(J, U, state_dim) and parameter arrays are (J, U, D).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
import pandas as pd

__all__ = [
    "TimeGrid",
    "Model",
    "PanelData",
    "stream",
    "simulate_panel",
]

# Stage tags for deriving independent generator streams; every stochastic
# stage of a run draws from its own (seed, stage, ...) stream so results do
# not depend on evaluation order or thread count.
STAGE_INIT = 0
STAGE_STEP = 1
STAGE_RESAMPLE = 2
STAGE_MEASURE = 3
STAGE_PERTURB = 4


def stream(seed, *key) -> np.random.Generator:
    """Deterministic generator for the integer key (seed, *key).

    ``seed`` may itself be a tuple of integers, so nested drivers can pass
    ``(master_seed, replicate)`` down to inner loops unchanged.
    """
    parts = []
    for part in (seed, *key):
        if isinstance(part, (tuple, list)):
            parts.extend(int(p) for p in part)
        else:
            parts.append(int(part))
    if any(p < 0 for p in parts):
        raise ValueError("stream keys must be non-negative integers")
    return np.random.default_rng(np.random.SeedSequence(parts))


class TimeGrid:
    """Time origin, observation times, and the process step size.

    The interval before each observation is subdivided into
    ceil(gap / dt) equal steps for the numerical solution.
    """

    def __init__(self, t0: float, obs_times, dt: float):
        obs_times = np.asarray(obs_times, dtype=float)
        if obs_times.ndim != 1 or obs_times.size == 0:
            raise ValueError("obs_times must be a non-empty 1-d sequence")
        if np.any(np.diff(obs_times) <= 0):
            raise ValueError("obs_times must be strictly increasing")
        if not t0 < obs_times[0]:
            raise ValueError("t0 must precede the first observation time")
        gaps = np.diff(np.concatenate([[t0], obs_times]))
        if not 0 < dt <= gaps.min() + 1e-12:
            raise ValueError("dt must be positive and at most the smallest gap")
        self.t0 = float(t0)
        self.obs_times = obs_times
        self.dt = float(dt)

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    def substeps(self, n: int) -> tuple[int, float]:
        """(count, size) of equal steps covering (t_{n-1}, t_n], n in 1..N."""
        lo = self.t0 if n == 1 else self.obs_times[n - 2]
        hi = self.obs_times[n - 1]
        k = max(1, int(np.ceil((hi - lo) / self.dt - 1e-9)))
        return k, (hi - lo) / k

    @classmethod
    def weekly(cls, t0: float, n_weeks: int, dt: float = 1.0 / 365.25) -> "TimeGrid":
        """Weekly observations (in years) starting one week after t0."""
        week = 7.0 / 365.25
        return cls(t0, t0 + week * np.arange(1, n_weeks + 1), dt)

    def __repr__(self):
        return f"TimeGrid(t0={self.t0}, n_obs={self.n_obs}, dt={self.dt})"


class Model(abc.ABC):
    """Behavioral contract for a coupled-unit state space model.

    Implementations must be pure functions of their arguments plus the
    supplied generator: unit u's state increment may read the full coupled
    state but only row u of the parameters, and the measurement density for
    unit u may depend only on unit u's state and parameters.  ``accum_vars``
    names state columns that accumulate within a reporting interval and are
    reset to zero after each measurement.
    """

    state_names: tuple[str, ...] = ()
    accum_vars: tuple[int, ...] = ()

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    @abc.abstractmethod
    def rinit(self, params: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw initial states, shape (J, U, state_dim), from (J, U, D) params."""

    @abc.abstractmethod
    def step(
        self,
        states: np.ndarray,
        params: np.ndarray,
        t: float,
        dt: float,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Advance all particles from t to t + dt under the coupled dynamics."""

    @abc.abstractmethod
    def dmeasure(
        self, y: np.ndarray, states: np.ndarray, params: np.ndarray
    ) -> np.ndarray:
        """Per-unit measurement log densities, shape (J, U).

        ``y`` has shape (U,) with NaN marking a missing observation, which
        must contribute log density 0 for that unit.
        """

    def rmeasure(
        self, states: np.ndarray, params: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Simulate one observation per particle and unit, shape (J, U)."""
        raise NotImplementedError(f"{type(self).__name__} has no measurement simulator")

    def reset_accumulators(self, states: np.ndarray) -> None:
        if self.accum_vars:
            states[..., list(self.accum_vars)] = 0


@dataclass
class PanelData:
    """U x N observation matrix with NaN for missing, plus observation times."""

    cases: np.ndarray
    units: tuple[str, ...]
    times: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.cases = np.asarray(self.cases, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.cases.ndim != 2:
            raise ValueError("cases must be a U x N matrix")
        U, N = self.cases.shape
        if len(self.units) != U or len(self.times) != N:
            raise ValueError("units/times lengths do not match the case matrix")

    @property
    def n_units(self) -> int:
        return self.cases.shape[0]

    @property
    def n_obs(self) -> int:
        return self.cases.shape[1]

    def grid(self, dt: float = 1.0 / 365.25) -> TimeGrid:
        return TimeGrid(self.t0, self.times, dt)

    def save_csv(self, path) -> None:
        """Write long-form rows ``week_index,unit,cases`` with literal NA."""
        U, N = self.cases.shape
        frame = pd.DataFrame(
            {
                "week_index": np.repeat(np.arange(1, N + 1), U),
                "unit": list(self.units) * N,
                "cases": self.cases.T.ravel(),
            }
        )
        frame["cases"] = frame["cases"].map(
            lambda v: "NA" if np.isnan(v) else str(int(v)) if v == int(v) else str(v)
        )
        frame.to_csv(path, index=False)

    @classmethod
    def load_csv(
        cls,
        path,
        t0: float = 0.0,
        period: float = 7.0 / 365.25,
        units: tuple[str, ...] | None = None,
    ) -> "PanelData":
        """Read ``week_index,unit,cases`` rows; week k observed at t0 + k*period."""
        frame = pd.read_csv(path, na_values=["NA"], keep_default_na=False)
        idx = np.sort(frame["week_index"].unique())
        if units is None:
            units = tuple(dict.fromkeys(frame["unit"]))
        table = frame.pivot(index="unit", columns="week_index", values="cases")
        missing = [u for u in units if u not in table.index]
        if missing:
            raise ValueError(f"case file {path} lacks units {missing}")
        cases = table.loc[list(units), idx].to_numpy(dtype=float)
        times = t0 + period * idx.astype(float)
        return cls(cases, tuple(units), times, t0)


def simulate_panel(
    model: Model,
    params,
    grid: TimeGrid,
    seed,
    units: tuple[str, ...] | None = None,
) -> PanelData:
    """Simulate one latent trajectory and its panel of observations.

    ``params`` is a ParameterMatrix (or a bare (U, D) array); the draw is a
    deterministic function of the seed.
    """
    values = getattr(params, "values", params)
    values = np.asarray(values, dtype=float)[None, :, :]
    U = values.shape[1]
    states = model.rinit(values, stream(seed, STAGE_INIT))
    cases = np.empty((U, grid.n_obs))
    t = grid.t0
    for n in range(1, grid.n_obs + 1):
        k, h = grid.substeps(n)
        for i in range(k):
            states = model.step(states, values, t, h, stream(seed, STAGE_STEP, n, i))
            t += h
        t = grid.obs_times[n - 1]
        y = model.rmeasure(states, values, stream(seed, STAGE_MEASURE, n))
        cases[:, n - 1] = y[0]
        model.reset_accumulators(states)
    if units is None:
        units = tuple(f"unit{u}" for u in range(U))
    return PanelData(cases, units, grid.obs_times.copy(), grid.t0)
