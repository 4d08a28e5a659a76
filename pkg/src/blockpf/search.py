"""Iterated block particle filtering for likelihood maximization.

Each iteration filters an extended model in which every parameter performs
a Gaussian random walk (on the estimation scale) with geometrically cooled
step sizes, resampling parameters blockwise together with the states.  A
spatial autoregressive correction pulls each block's per-unit copies of a
shared parameter toward the across-block mean, so shared parameters
coalesce while unit-specific ones stay free.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    STAGE_INIT,
    STAGE_PERTURB,
    STAGE_RESAMPLE,
    STAGE_STEP,
    Model,
    PanelData,
    TimeGrid,
    stream,
)
from .filtering import LOG_FLOOR, Swarm, _check_density, _log_mean_weight, _mask_missing, _systematic
from .params import (
    BlockPartition,
    ParameterLayout,
    ParameterMatrix,
    collapse,
    expand_shared,
    from_estimation_scale,
    make_block_partition,
    to_estimation_scale,
)

__all__ = [
    "SigmaSchedule",
    "IbpfConfig",
    "IbpfResult",
    "build_sigma_schedule",
    "cooling_factor",
    "perturb",
    "ar_correct",
    "ibpf_run",
]

# Iteration count over which the perturbation variance decays by a^2; fixed
# by the algorithm, not a tuning knob.
COOLING_SCALE = 50


@dataclass
class SigmaSchedule:
    """Per-parameter, per-time perturbation standard deviations.

    ``sigma`` has shape (D, N+1); column 0 applies before reinitialization
    at the start of each iteration.  Initial-value parameters must have
    zeros in every column past the first.
    """

    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.ndim != 2:
            raise ValueError("sigma must be a (D, N+1) matrix")
        if (self.sigma < 0).any():
            raise ValueError("sigma must be non-negative")

    def check_ivp_rows(self, layout: ParameterLayout) -> None:
        bad = layout.ivp_mask & (self.sigma[:, 1:].any(axis=1))
        if bad.any():
            name = layout.entries[int(np.nonzero(bad)[0][0])].name
            raise ValueError(f"IVP {name!r} has nonzero sigma after time 0")

    @property
    def n_obs(self) -> int:
        return self.sigma.shape[1] - 1


def build_sigma_schedule(
    layout: ParameterLayout,
    sigma_base: float,
    n_obs: int,
    overrides: dict[str, float] | None = None,
    scaled_names: dict[str, float] | None = None,
) -> SigmaSchedule:
    """Reduce the full schedule to one scalar: regular parameters move with
    standard deviation ``sigma_base`` at every time; initial-value
    parameters move only before reinitialization, with twice the base; the
    mixing exponent (entry named ``alpha``) moves at a tenth of the base.

    ``overrides`` replaces the per-time value for named entries;
    ``scaled_names`` replaces the default {"alpha": 0.1} special scaling.
    """
    if sigma_base <= 0:
        raise ValueError("sigma_base must be > 0")
    if scaled_names is None:
        scaled_names = {"alpha": 0.1}
    names = set(layout.names)
    for name in (overrides or {}):
        if name not in names:
            raise ValueError(f"override for unknown parameter {name!r}")
    D = layout.n_params
    sig = np.full((D, n_obs + 1), sigma_base)
    for d, spec in enumerate(layout.entries):
        if spec.name in scaled_names and not spec.ivp:
            sig[d, :] = scaled_names[spec.name] * sigma_base
        if spec.ivp:
            sig[d, 0] = 2.0 * sigma_base
            sig[d, 1:] = 0.0
        if overrides and spec.name in overrides:
            val = overrides[spec.name]
            if spec.ivp:
                sig[d, 0] = val
            else:
                sig[d, :] = val
    sched = SigmaSchedule(sig)
    sched.check_ivp_rows(layout)
    return sched


@dataclass
class IbpfConfig:
    """Algorithmic parameters of the iterated search."""

    n_particles: int = 4000
    n_iterations: int = 100
    sigma: SigmaSchedule | float = 0.005
    cooling_rate: float = 0.5
    spat_reg: float = 0.1
    blocks: BlockPartition | None = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0 < self.cooling_rate <= 1:
            raise ValueError("cooling_rate must lie in (0, 1]")
        if not 0 <= self.spat_reg <= 1:
            raise ValueError("spat_reg must lie in [0, 1]")

    def sigma_schedule(self, layout: ParameterLayout, n_obs: int) -> SigmaSchedule:
        if isinstance(self.sigma, SigmaSchedule):
            if self.sigma.n_obs != n_obs:
                raise ValueError("sigma schedule does not match the data length")
            return self.sigma
        return build_sigma_schedule(layout, float(self.sigma), n_obs)


def cooling_factor(cooling_rate: float, m: int) -> float:
    """Variance multiplier a^(2m/50) at iteration m (std multiplier is its root)."""
    if m < 0:
        raise ValueError("iteration index must be >= 0")
    return float(cooling_rate ** (2.0 * m / COOLING_SCALE))


def perturb(
    params,
    layout: ParameterLayout,
    sigma_col: np.ndarray,
    cooled_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Add independent Gaussian noise on the estimation scale.

    ``params`` is natural-scale with shape (..., U, D); every per-unit copy
    (including copies of shared parameters) receives its own noise.
    """
    values = np.asarray(getattr(params, "values", params), dtype=float)
    sigma_col = np.asarray(sigma_col, dtype=float)
    est = to_estimation_scale(values, layout)
    scale = sigma_col * cooled_std
    if np.any(scale > 0):
        est = est + rng.standard_normal(est.shape) * scale
    return from_estimation_scale(est, layout)


def _perturb_est(est, layout, sigma_col, cooled_std, rng):
    scale = sigma_col * cooled_std
    if np.any(scale > 0):
        est += rng.standard_normal(est.shape) * scale
    return est


def ar_correct(
    est: np.ndarray,
    layout: ParameterLayout,
    blocks: BlockPartition,
    spat_reg: float,
) -> np.ndarray:
    """Shift each block's copies of every shared parameter toward the mean.

    Operates on estimation-scale values of shape (J, U, D).  For a shared
    column, the block mean is the average over the block's particles and
    units, the overall mean is the average of block means, and every copy
    in block b moves by spat_reg * (overall - block_b).  Unit-specific
    columns are untouched.  The overall mean is preserved exactly and the
    across-block variance of block means contracts by (1 - spat_reg)^2.
    """
    est = np.array(est, dtype=float)
    if spat_reg == 0 or len(layout.shared_cols) == 0:
        return est
    for d in layout.shared_cols:
        block_means = np.array([est[:, list(b), d].mean() for b in blocks])
        overall = block_means.mean()
        for b, mu_b in zip(blocks, block_means):
            est[:, list(b), d] += spat_reg * (overall - mu_b)
    return est


@dataclass
class IbpfResult:
    """Final swarm plus per-iteration search diagnostics."""

    swarm: Swarm
    logliks: np.ndarray  # (M,) perturbed-model block-filter log-likelihoods
    estimates: np.ndarray  # (M, flat_dim) collapsed point estimates
    shared_spread: np.ndarray  # (M, n_shared) across-unit sd of unit means
    failures: list = field(default_factory=list)  # [(m, n, block)]

    @property
    def final_estimate(self) -> np.ndarray:
        return self.estimates[-1]


def _point_estimate(est_stack: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    mean_est = est_stack.mean(axis=0)
    pm = ParameterMatrix(from_estimation_scale(mean_est, layout), layout)
    return collapse(pm)


def _shared_spread(est_stack: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    unit_means = est_stack.mean(axis=0)  # (U, D)
    return unit_means[:, layout.shared_cols].std(axis=0)


def ibpf_run(
    model: Model,
    data,
    grid: TimeGrid | None = None,
    config: IbpfConfig | None = None,
    theta=None,
    layout: ParameterLayout | None = None,
    swarm: Swarm | None = None,
    seed=0,
) -> IbpfResult:
    """Run the iterated block particle filter search.

    The swarm starts as J exact copies of ``theta`` (diversity enters
    through the time-0 perturbation of the first iteration) unless an
    explicit ``swarm`` is given.  Per-iteration log-likelihoods refer to
    the extended, perturbed model; evaluate the returned estimate with a
    fixed-parameter filter run to obtain a definitive likelihood.
    """
    if config is None:
        config = IbpfConfig()
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
        raise ValueError("grid does not match the data length")

    if swarm is not None:
        layout = swarm.layout
        J = swarm.n_particles
        if J != config.n_particles:
            raise ValueError("swarm size disagrees with config.n_particles")
        est = to_estimation_scale(swarm.params, layout)
    else:
        if theta is None or layout is None:
            raise ValueError("theta and layout are required without a swarm")
        J = config.n_particles
        pm = expand_shared(theta, layout)
        est = np.broadcast_to(pm.to_estimation(), (J, U, layout.n_params)).copy()
    if layout.n_units != U:
        raise ValueError("layout does not match the number of units")

    blocks = config.blocks or make_block_partition(U)
    if blocks.n_units != U:
        raise ValueError("block partition does not match the number of units")
    sched = config.sigma_schedule(layout, N)
    sched.check_ivp_rows(layout)
    if sched.sigma.shape[0] != layout.n_params:
        raise ValueError("sigma schedule does not match the layout dimension")

    M = config.n_iterations
    logliks = np.zeros(M)
    estimates = np.zeros((M, layout.flat_dim))
    spread = np.zeros((M, len(layout.shared_cols)))
    failures: list[tuple[int, int, int]] = []
    states = None

    for m in range(1, M + 1):
        cool = cooling_factor(config.cooling_rate, m) ** 0.5
        est = _perturb_est(
            est, layout, sched.sigma[:, 0], cool, stream(seed, STAGE_PERTURB, m, 0)
        )
        nat = from_estimation_scale(est, layout)
        states = model.rinit(nat, stream(seed, STAGE_INIT, m))
        total = 0.0
        t = grid.t0
        for n in range(1, N + 1):
            est = _perturb_est(
                est, layout, sched.sigma[:, n], cool, stream(seed, STAGE_PERTURB, m, n)
            )
            nat = from_estimation_scale(est, layout)

            k_sub, h = grid.substeps(n)
            for i in range(k_sub):
                states = model.step(states, nat, t, h, stream(seed, STAGE_STEP, m, n, i))
                t += h
            t = grid.obs_times[n - 1]

            y = y_all[:, n - 1]
            logd = model.dmeasure(y, states, nat)
            logd = _mask_missing(logd, y)
            _check_density(logd, n)

            new_states = states.copy()
            new_est = est.copy()
            for b, block in enumerate(blocks):
                cols = list(block)
                lw = logd[:, cols].sum(axis=1)
                log_mean, w = _log_mean_weight(lw)
                rng_b = stream(seed, STAGE_RESAMPLE, m, n, b)
                if w is None:
                    total += LOG_FLOOR
                    failures.append((m, n, b))
                    ancestors = _systematic(np.full(J, 1.0 / J), rng_b)
                else:
                    total += log_mean
                    ancestors = _systematic(w, rng_b)
                new_states[:, cols] = states[np.ix_(ancestors, cols)]
                new_est[:, cols] = est[np.ix_(ancestors, cols)]
            states = new_states
            est = ar_correct(new_est, layout, blocks, config.spat_reg)
            model.reset_accumulators(states)

        logliks[m - 1] = total
        estimates[m - 1] = _point_estimate(est, layout)
        spread[m - 1] = _shared_spread(est, layout)

    final = Swarm(states, from_estimation_scale(est, layout), layout)
    return IbpfResult(final, logliks, estimates, spread, failures)
