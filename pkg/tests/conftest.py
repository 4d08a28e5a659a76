import numpy as np
import pytest

from blockpf import Model, ParameterLayout, ParamSpec


class ConstDensityModel(Model):
    """Deterministic latent process with a constant measurement density.

    Useful for plumbing tests: loglik is N * K * log(density).
    """

    state_names = ("x",)

    def __init__(self, n_units: int, log_density: float = 0.0):
        self.n_units = n_units
        self.log_density = log_density

    def rinit(self, params, rng):
        return np.zeros(params.shape[:2] + (1,))

    def step(self, states, params, t, dt, rng):
        return states

    def dmeasure(self, y, states, params):
        return np.full(states.shape[:2], self.log_density)

    def rmeasure(self, states, params, rng):
        return np.zeros(states.shape[:2])


class TableDensityModel(Model):
    """Measurement log densities scripted per (time, unit); identity dynamics.

    ``table`` has shape (N, J, U): row n supplies every particle's per-unit
    log density at observation n (time index advances on each dmeasure
    call, so run it through a filter exactly once).
    """

    state_names = ("x",)

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        self._n = 0

    def rinit(self, params, rng):
        self._n = 0
        return np.zeros(params.shape[:2] + (1,))

    def step(self, states, params, t, dt, rng):
        return states

    def dmeasure(self, y, states, params):
        out = self.table[self._n]
        self._n += 1
        return np.array(out)


@pytest.fixture
def two_unit_layout():
    return ParameterLayout(
        [
            ParamSpec("a", "shared", "identity"),
            ParamSpec("rho", "unit_specific", "logit"),
        ],
        2,
    )


def combined_se(*samples) -> float:
    """Standard error of a difference of independent sample means."""
    return float(
        np.sqrt(sum(np.var(s, ddof=1) / len(s) for s in samples))
    )
