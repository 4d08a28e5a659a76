"""Independent correctness oracles for the filtering code.

Small finite-state coupled hidden Markov models admit an exact forward
likelihood over the joint state space, and a plain bootstrap particle
filter is a consistent estimator of the same quantity.  Both are written
without reference to the block filter so they can vouch for it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import STAGE_INIT, STAGE_MEASURE, STAGE_RESAMPLE, STAGE_STEP, Model, TimeGrid, stream

__all__ = [
    "FiniteSpatHMM",
    "HmmModel",
    "exact_loglik",
    "plain_pf_loglik",
    "random_coupled_hmm",
    "product_hmm",
]

MAX_JOINT_STATES = 10**6


@dataclass
class FiniteSpatHMM:
    """U units, each with s latent states, a joint transition kernel on s^U
    joint states, per-unit emission matrices, and an initial distribution.

    Joint state k encodes per-unit states with unit 0 least significant:
    k = sum_u x_u * s**u.
    """

    n_units: int
    n_states: int
    kernel: np.ndarray  # (S, S), S = s**U
    emissions: np.ndarray  # (U, s, n_symbols)
    init: np.ndarray  # (S,)

    def __post_init__(self):
        S = self.n_states**self.n_units
        if S > MAX_JOINT_STATES:
            raise ValueError(f"joint state space {S} exceeds {MAX_JOINT_STATES}")
        self.kernel = np.asarray(self.kernel, dtype=float)
        self.emissions = np.asarray(self.emissions, dtype=float)
        self.init = np.asarray(self.init, dtype=float)
        if self.kernel.shape != (S, S):
            raise ValueError("kernel shape does not match s**U")
        if self.emissions.shape[:2] != (self.n_units, self.n_states):
            raise ValueError("emissions must be (U, s, n_symbols)")
        if self.init.shape != (S,):
            raise ValueError("init must have one entry per joint state")
        if np.abs(self.kernel.sum(axis=1) - 1).max() > 1e-12:
            raise ValueError("kernel rows must sum to 1 within 1e-12")
        if np.abs(self.emissions.sum(axis=2) - 1).max() > 1e-12:
            raise ValueError("emission rows must sum to 1 within 1e-12")
        if abs(self.init.sum() - 1) > 1e-12:
            raise ValueError("init must sum to 1 within 1e-12")

    @property
    def n_joint(self) -> int:
        return self.n_states**self.n_units

    def decode_table(self) -> np.ndarray:
        """(S, U) per-unit states of each joint state."""
        k = np.arange(self.n_joint)
        out = np.empty((self.n_joint, self.n_units), dtype=np.int64)
        for u in range(self.n_units):
            out[:, u] = k % self.n_states
            k = k // self.n_states
        return out

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Joint index from (..., U) per-unit states."""
        powers = self.n_states ** np.arange(self.n_units)
        return (np.asarray(x) * powers).sum(axis=-1)

    def obs_probs(self, y: np.ndarray) -> np.ndarray:
        """P(y_u for all u | joint state) over joint states; NaN y_u skipped."""
        dec = self.decode_table()
        out = np.ones(self.n_joint)
        for u in range(self.n_units):
            if np.isnan(y[u]):
                continue
            out *= self.emissions[u, dec[:, u], int(y[u])]
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_units": self.n_units,
                "n_states": self.n_states,
                "kernel": self.kernel.tolist(),
                "emissions": self.emissions.tolist(),
                "init": self.init.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FiniteSpatHMM":
        doc = json.loads(text)
        return cls(
            n_units=doc["n_units"],
            n_states=doc["n_states"],
            kernel=np.asarray(doc["kernel"]),
            emissions=np.asarray(doc["emissions"]),
            init=np.asarray(doc["init"]),
        )


def exact_loglik(hmm: FiniteSpatHMM, data: np.ndarray) -> float:
    """Exact log-likelihood by the normalized forward recursion.

    ``data`` is (U, N) integer observation symbols (NaN for missing).
    ``init`` is the latent distribution at the time origin: one kernel
    transition precedes each observation, including the first.
    """
    data = np.asarray(data, dtype=float)
    U, N = data.shape
    if U != hmm.n_units:
        raise ValueError("data unit count does not match the model")
    alpha = hmm.init
    total = 0.0
    for n in range(N):
        alpha = (alpha @ hmm.kernel) * hmm.obs_probs(data[:, n])
        c = alpha.sum()
        if c == 0:
            return -np.inf
        total += np.log(c)
        alpha = alpha / c
    return float(total)


class HmmModel(Model):
    """Finite coupled HMM exposed through the simulation-based model contract."""

    state_names = ("x",)

    def __init__(self, hmm: FiniteSpatHMM):
        self.hmm = hmm
        self._cum_kernel = np.cumsum(hmm.kernel, axis=1)
        self._cum_init = np.cumsum(hmm.init)
        self._dec = hmm.decode_table()
        self._log_emissions = np.log(
            np.where(hmm.emissions > 0, hmm.emissions, np.finfo(float).tiny)
        )
        self._log_emissions[hmm.emissions == 0] = -np.inf

    def rinit(self, params, rng):
        J = params.shape[0]
        k = np.searchsorted(self._cum_init, rng.random(J), side="right")
        k = np.minimum(k, self.hmm.n_joint - 1)
        return self._dec[k][:, :, None].astype(np.int64)

    def step(self, states, params, t, dt, rng):
        k = self.hmm.encode(states[:, :, 0])
        r = rng.random(len(k))
        nxt = (self._cum_kernel[k] < r[:, None]).sum(axis=1)
        nxt = np.minimum(nxt, self.hmm.n_joint - 1)
        return self._dec[nxt][:, :, None].astype(np.int64)

    def dmeasure(self, y, states, params):
        J, U = states.shape[:2]
        out = np.zeros((J, U))
        for u in range(U):
            if np.isnan(y[u]):
                continue
            out[:, u] = self._log_emissions[u, states[:, u, 0], int(y[u])]
        return out

    def rmeasure(self, states, params, rng):
        J, U = states.shape[:2]
        cum = np.cumsum(self.hmm.emissions, axis=2)
        out = np.empty((J, U), dtype=np.int64)
        r = rng.random((J, U))
        for u in range(U):
            rows = cum[u, states[:, u, 0]]
            out[:, u] = (rows < r[:, [u]]).sum(axis=1)
        return out


def plain_pf_loglik(model, data, grid: TimeGrid | None = None, params=None, n_particles: int = 1000, seed=0) -> float:
    """Standard bootstrap particle filter log-likelihood.

    All units form a single block: weights are the product of every unit's
    measurement density and the whole particle is resampled at once
    (multinomial).  ``model`` may be a FiniteSpatHMM or any Model; in the
    former case ``grid`` and ``params`` are implied.
    """
    if isinstance(model, FiniteSpatHMM):
        hmm = model
        model = HmmModel(hmm)
        U, N = np.shape(data)
        grid = TimeGrid(0.0, np.arange(1.0, N + 1), 1.0)
        params = np.zeros((hmm.n_units, 0))
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    data = np.asarray(data, dtype=float)
    U, N = data.shape
    values = getattr(params, "values", params)
    stack = np.broadcast_to(np.asarray(values, dtype=float), (n_particles, U, np.shape(values)[-1]))

    states = model.rinit(stack, stream(seed, STAGE_INIT))
    total = 0.0
    t = grid.t0
    for n in range(1, N + 1):
        k_sub, h = grid.substeps(n)
        for i in range(k_sub):
            states = model.step(states, stack, t, h, stream(seed, STAGE_STEP, n, i))
            t += h
        t = grid.obs_times[n - 1]
        y = data[:, n - 1]
        logd = model.dmeasure(y, states, stack)
        miss = np.isnan(y)
        if miss.any():
            logd[:, miss] = 0.0
        lw = logd.sum(axis=1)
        m = lw.max()
        if not np.isfinite(m):
            total += np.log(np.finfo(float).tiny)
            idx = stream(seed, STAGE_RESAMPLE, n).integers(0, n_particles, n_particles)
        else:
            w = np.exp(lw - m)
            total += m + np.log(w.mean())
            idx = stream(seed, STAGE_RESAMPLE, n).choice(
                n_particles, size=n_particles, p=w / w.sum()
            )
        states = states[idx]
        model.reset_accumulators(states)
    return float(total)


def simulate_hmm(hmm: FiniteSpatHMM, n_obs: int, seed=0) -> np.ndarray:
    """Draw one (U, N) observation panel from the model."""
    model = HmmModel(hmm)
    params = np.zeros((1, hmm.n_units, 0))
    states = model.rinit(params, stream(seed, STAGE_INIT))
    out = np.empty((hmm.n_units, n_obs), dtype=np.int64)
    for n in range(1, n_obs + 1):
        states = model.step(states, params, n - 1.0, 1.0, stream(seed, STAGE_STEP, n, 0))
        out[:, n - 1] = model.rmeasure(states, params, stream(seed, STAGE_MEASURE, n))[0]
    return out


def random_coupled_hmm(
    n_units: int = 2,
    n_states: int = 3,
    n_symbols: int = 3,
    seed: int = 0,
    informative: float = 3.0,
) -> FiniteSpatHMM:
    """A random joint kernel with genuine cross-unit coupling.

    ``informative`` boosts the diagonal of each emission matrix so the data
    carry signal about the latent states.
    """
    rng = np.random.default_rng(seed)
    S = n_states**n_units
    kernel = rng.random((S, S)) + 0.2
    kernel /= kernel.sum(axis=1, keepdims=True)
    emissions = rng.random((n_units, n_states, n_symbols)) + 0.2
    for u in range(n_units):
        for x in range(n_states):
            emissions[u, x, x % n_symbols] += informative
    emissions /= emissions.sum(axis=2, keepdims=True)
    init = rng.random(S) + 0.2
    init /= init.sum()
    return FiniteSpatHMM(n_units, n_states, kernel, emissions, init)


def product_hmm(unit_kernels, unit_emissions, unit_inits) -> FiniteSpatHMM:
    """Joint model with zero cross-unit coupling (tensor product of units)."""
    U = len(unit_kernels)
    s = np.asarray(unit_kernels[0]).shape[0]
    S = s**U
    dec = np.empty((S, U), dtype=np.int64)
    k = np.arange(S)
    for u in range(U):
        dec[:, u] = k % s
        k = k // s
    kernel = np.ones((S, S))
    init = np.ones(S)
    for u in range(U):
        Ku = np.asarray(unit_kernels[u], dtype=float)
        kernel *= Ku[np.ix_(dec[:, u], dec[:, u])]
        init *= np.asarray(unit_inits[u], dtype=float)[dec[:, u]]
    emissions = np.stack([np.asarray(e, dtype=float) for e in unit_emissions])
    return FiniteSpatHMM(U, s, kernel, emissions, init)


def unit_marginal(hmm: FiniteSpatHMM, u: int, unit_kernel, unit_init) -> FiniteSpatHMM:
    """Single-unit model for unit u of an uncoupled (product) joint model."""
    return FiniteSpatHMM(
        1,
        hmm.n_states,
        np.asarray(unit_kernel, dtype=float),
        hmm.emissions[[u]],
        np.asarray(unit_init, dtype=float),
    )
