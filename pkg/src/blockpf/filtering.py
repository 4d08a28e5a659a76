"""The block particle filter.

Particles are propagated jointly under the full coupled dynamics, then each
block of units is weighted by the product of its unit measurement densities
and resampled independently of the other blocks.  The log-likelihood is the
sum over times and blocks of log-mean prediction weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import (
    STAGE_INIT,
    STAGE_RESAMPLE,
    STAGE_STEP,
    Model,
    PanelData,
    TimeGrid,
    stream,
)
from .params import BlockPartition, ParameterLayout, ParameterMatrix, make_block_partition

__all__ = [
    "Swarm",
    "FilterResult",
    "FilterError",
    "block_log_weights",
    "resample_block",
    "bpf_run",
]

# Conditional likelihood assigned to a block in which every particle has
# zero measurement density ("filtering failure").
LIKELIHOOD_FLOOR = float(np.finfo(float).tiny)
LOG_FLOOR = float(np.log(np.finfo(float).tiny))


class FilterError(RuntimeError):
    """A model returned an invalid (NaN) measurement density."""


@dataclass
class Swarm:
    """J particle replicas: latent states plus per-particle parameter matrices.

    ``states`` is (J, U, state_dim); ``params`` is (J, U, D) on the natural
    scale.  All particles share one layout.
    """

    states: np.ndarray
    params: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        if self.params.ndim != 3 or self.states.ndim != 3:
            raise ValueError("states and params must be (J, U, ...) arrays")
        if self.states.shape[0] != self.params.shape[0]:
            raise ValueError("states and params disagree on particle count")
        if self.params.shape[1:] != (self.layout.n_units, self.layout.n_params):
            raise ValueError("params shape does not match layout")

    @property
    def n_particles(self) -> int:
        return self.params.shape[0]

    def mean_matrix(self) -> ParameterMatrix:
        """Across-particle mean on the estimation scale, as a matrix."""
        from .params import from_estimation_scale, to_estimation_scale

        est = to_estimation_scale(self.params, self.layout)
        return ParameterMatrix(
            from_estimation_scale(est.mean(axis=0), self.layout), self.layout
        )


@dataclass
class FilterResult:
    """Log-likelihood plus per-time, per-block conditional diagnostics."""

    loglik: float
    cond_loglik: np.ndarray  # (N, K)
    ess: np.ndarray  # (N, K)
    filter_mean: np.ndarray | None = None  # (N, U, state_dim)
    failures: list = field(default_factory=list)  # [(n, block)] 1-based n

    def trace_frame(self) -> pd.DataFrame:
        N, K = self.cond_loglik.shape
        return pd.DataFrame(
            {
                "n": np.repeat(np.arange(1, N + 1), K),
                "block": np.tile(np.arange(K), N),
                "cond_loglik": self.cond_loglik.ravel(),
                "ess": self.ess.ravel(),
            }
        )

    def save_csv(self, path) -> None:
        self.trace_frame().to_csv(path, index=False)

    def to_json(self) -> str:
        doc = {
            "loglik": self.loglik,
            "cond_loglik": self.cond_loglik.tolist(),
            "ess": self.ess.tolist(),
            "failures": [list(f) for f in self.failures],
        }
        if self.filter_mean is not None:
            doc["filter_mean"] = self.filter_mean.tolist()
        return json.dumps(doc, indent=2)


def _systematic(
    weights: np.ndarray, rng: np.random.Generator, n_out: int | None = None
) -> np.ndarray:
    """Systematic resampling: marginal pick probability n_out * w_j / sum(w)."""
    if n_out is None:
        n_out = len(weights)
    positions = (rng.random() + np.arange(n_out)) / n_out
    cum = np.cumsum(weights)
    cum /= cum[-1]
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(weights) - 1)


def resample_block(
    log_weights: np.ndarray, rng: np.random.Generator, n_out: int | None = None
) -> np.ndarray:
    """Ancestor indices (n_out of them, default one per weight) from log-weights.

    Uses systematic resampling against the normalized weights.  If every
    weight is zero (all log-weights -inf) the block has suffered a
    filtering failure and ancestors are drawn uniformly; the caller is
    responsible for flooring the conditional likelihood of that cell.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    m = log_weights.max()
    if not np.isfinite(m):
        w = np.full(log_weights.shape, 1.0 / len(log_weights))
    else:
        w = np.exp(log_weights - m)
    return _systematic(w, rng, n_out)


def block_log_weights(
    model: Model,
    y: np.ndarray,
    states: np.ndarray,
    params: np.ndarray,
    block,
) -> np.ndarray:
    """J log-weights for one block: sum of unit log densities over the block.

    Missing observations (NaN) contribute 0.
    """
    logd = model.dmeasure(np.asarray(y, dtype=float), states, params)
    logd = _mask_missing(logd, y)
    return logd[:, list(block)].sum(axis=1)


def _mask_missing(logd: np.ndarray, y: np.ndarray) -> np.ndarray:
    miss = np.isnan(np.asarray(y, dtype=float))
    if miss.any():
        logd = logd.copy()
        logd[:, miss] = 0.0
    return logd


def _check_density(logd: np.ndarray, n: int) -> None:
    if np.isnan(logd).any():
        j, u = np.argwhere(np.isnan(logd))[0]
        raise FilterError(
            f"measurement density is NaN for particle {j}, unit {u}, time {n}"
        )


def _log_mean_weight(lw: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Stable log(mean(exp(lw))) and normalized weights (None on failure)."""
    m = lw.max()
    if not np.isfinite(m):
        return -np.inf, None
    w = np.exp(lw - m)
    s = w.sum()
    return float(m + np.log(s / len(lw))), w / s


def _as_param_stack(params, J: int) -> tuple[np.ndarray, bool]:
    """Normalize the parameter argument to a (J, U, D) view.

    Returns the stack and whether it is per-particle (needs co-resampling).
    """
    if isinstance(params, Swarm):
        raise TypeError("pass swarm= separately")
    if isinstance(params, ParameterMatrix):
        return np.broadcast_to(params.values, (J, *params.values.shape)), False
    arr = np.asarray(params, dtype=float)
    if arr.ndim == 2:
        return np.broadcast_to(arr, (J, *arr.shape)), False
    if arr.ndim == 3:
        if arr.shape[0] != J:
            raise ValueError("per-particle params disagree with particle count")
        return arr, True
    raise ValueError("params must be a matrix, a (J,U,D) stack, or a Swarm")


def bpf_run(
    model: Model,
    data,
    grid: TimeGrid | None = None,
    params=None,
    layout: ParameterLayout | None = None,
    n_particles: int | None = None,
    blocks: BlockPartition | None = None,
    seed=0,
    track_filter_mean: bool = False,
) -> FilterResult:
    """Run the block particle filter and return its likelihood evaluation.

    Parameters
    ----------
    model : Model
    data : PanelData or (U, N) array with NaN for missing observations.
    grid : observation grid; defaults to ``data.grid()`` for PanelData.
    params : flat theta (requires ``layout``), ParameterMatrix, (J, U, D)
        stack, or Swarm.  Fixed parameters are broadcast to all particles;
        a per-particle stack is resampled blockwise along with the states.
    n_particles : J; required unless ``params`` already carries it.
    blocks : resampling partition; singleton blocks by default.
    seed : integer (or tuple) keying all generator streams of the run.
    """
    if isinstance(data, PanelData):
        y_all = data.cases
        if grid is None:
            grid = data.grid()
    else:
        y_all = np.asarray(data, dtype=float)
        if grid is None:
            raise ValueError("grid is required when data is a bare array")
    U, N = y_all.shape
    if grid.n_obs != N:
        raise ValueError(f"data has {N} observation columns; grid has {grid.n_obs}")

    if isinstance(params, Swarm):
        stack, per_particle = params.params, True
        J = params.n_particles
        if n_particles is not None and n_particles != J:
            raise ValueError("n_particles disagrees with swarm size")
    else:
        if params is None:
            raise ValueError("params is required")
        if np.ndim(params) == 1:
            if layout is None:
                raise ValueError("a flat theta requires a layout")
            from .params import expand_shared

            params = expand_shared(params, layout)
        if n_particles is None and np.ndim(params) == 3:
            n_particles = np.shape(params)[0]
        if n_particles is None:
            raise ValueError("n_particles is required with fixed parameters")
        J = int(n_particles)
        stack, per_particle = _as_param_stack(params, J)

    if stack.shape[1] != U:
        raise ValueError(f"params cover {stack.shape[1]} units; data has {U}")
    if blocks is None:
        blocks = make_block_partition(U)
    elif blocks.n_units != U:
        raise ValueError("block partition does not match the number of units")
    K = blocks.n_blocks

    states = model.rinit(stack, stream(seed, STAGE_INIT))
    cond = np.zeros((N, K))
    ess = np.zeros((N, K))
    failures: list[tuple[int, int]] = []
    filter_mean = np.zeros((N, U, model.state_dim)) if track_filter_mean else None

    t = grid.t0
    for n in range(1, N + 1):
        k_sub, h = grid.substeps(n)
        for i in range(k_sub):
            states = model.step(states, stack, t, h, stream(seed, STAGE_STEP, n, i))
            t += h
        t = grid.obs_times[n - 1]

        y = y_all[:, n - 1]
        logd = model.dmeasure(y, states, stack)
        logd = _mask_missing(logd, y)
        _check_density(logd, n)

        new_states = states.copy()
        new_stack = stack.copy() if per_particle else stack
        for b, block in enumerate(blocks):
            cols = list(block)
            lw = logd[:, cols].sum(axis=1)
            log_mean, w = _log_mean_weight(lw)
            rng_b = stream(seed, STAGE_RESAMPLE, n, b)
            if w is None:
                cond[n - 1, b] = LOG_FLOOR
                ess[n - 1, b] = J
                failures.append((n, b))
                ancestors = _systematic(np.full(J, 1.0 / J), rng_b)
            else:
                cond[n - 1, b] = log_mean
                ess[n - 1, b] = 1.0 / np.sum(w**2)
                ancestors = _systematic(w, rng_b)
            new_states[:, cols] = states[np.ix_(ancestors, cols)]
            if per_particle:
                new_stack[:, cols] = stack[np.ix_(ancestors, cols)]
        states = new_states
        stack = new_stack

        if track_filter_mean:
            filter_mean[n - 1] = states.mean(axis=0)
        model.reset_accumulators(states)

    return FilterResult(
        loglik=float(cond.sum()),
        cond_loglik=cond,
        ess=ess,
        filter_mean=filter_mean,
        failures=failures,
    )
