"""Stochastic SEIR measles metapopulation dynamics with case-report measurement.

Integer compartments per town evolve by competing-hazard multinomial draws
over small time steps: transmission carries multiplicative gamma noise,
school-term seasonality modulates the contact rate, a gravity rule moves
infection between towns, and births enter the susceptible pool partly as a
cohort pulse on the school admission day.  Weekly case reports follow an
overdispersed discretized-Gaussian count model with missing-data support.

Units and conventions
---------------------
Model time is measured in years with a daily default step.  Rate
parameters (mu_EI, mu_IR, and the transmission rate they imply through R0)
are stored per week, matching how they are usually reported; gamma-noise
intensity sigma_SE is in year^(1/2); the background death rate is per year.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .core import Model
from .params import ParameterLayout, ParamSpec

__all__ = [
    "SchoolCalendar",
    "MeaslesCovariates",
    "MeaslesModel",
    "seasonal_beta",
    "travel_matrix",
    "infection_rate",
    "report_logpmf",
    "simulate_reports",
    "measles_layout",
    "build_submodel",
    "theta_from_dict",
    "demo_covariates",
    "save_covariates",
    "load_covariates",
    "SIM_TRUTH",
    "WEEKS_PER_YEAR",
]

WEEKS_PER_YEAR = 365.25 / 7.0
DAYS_PER_YEAR = 365.25
SCHOOL_ADMISSION_DAY = 252.0 / 365.0  # fraction of the year


# ---------------------------------------------------------------------------
# School calendar and seasonal transmission


DEFAULT_HOLIDAYS = ((356, 365), (1, 6), (100, 115), (200, 251), (300, 308))


@dataclass(frozen=True)
class SchoolCalendar:
    """Holiday day-of-year intervals (half-open) and the school-term fraction.

    ``term_frac`` is the constant used by the seasonal transmission formula;
    construction checks that it matches the calendar's actual term-day
    fraction within 0.5%.
    """

    holidays: tuple[tuple[float, float], ...] = DEFAULT_HOLIDAYS
    term_frac: float = 0.759

    def __post_init__(self):
        if not 0 < self.term_frac < 1:
            raise ValueError("term_frac must lie in (0, 1)")
        actual = 1.0 - self.holiday_day_count() / 365.0
        if abs(actual - self.term_frac) > 0.005 * self.term_frac:
            raise ValueError(
                f"calendar term fraction {actual:.4f} is not within 0.5% of "
                f"term_frac {self.term_frac}"
            )

    def holiday_day_count(self) -> int:
        days = np.arange(1, 366)
        hol = np.zeros(365, dtype=bool)
        for lo, hi in self.holidays:
            hol |= (days >= lo) & (days < hi)
        return int(hol.sum())

    def is_term(self, t: float) -> bool:
        """School in session at model time t (years)?"""
        day = math.floor((t - math.floor(t)) * DAYS_PER_YEAR) + 1
        for lo, hi in self.holidays:
            if lo <= day < hi:
                return False
        return True

    def to_json(self) -> str:
        return json.dumps(
            {"term_fraction": self.term_frac, "holidays": [list(h) for h in self.holidays]}
        )

    @classmethod
    def from_json(cls, text: str) -> "SchoolCalendar":
        doc = json.loads(text)
        return cls(
            holidays=tuple(tuple(h) for h in doc["holidays"]),
            term_frac=float(doc["term_fraction"]),
        )


def seasonal_beta(t: float, mean_beta, amplitude, calendar: SchoolCalendar):
    """Transmission rate at time t: boosted in term, reduced in vacation.

    The year-round average equals ``mean_beta`` identically, because the
    term boost 1 + a(1-p)/p and the vacation factor 1 - a average to one
    under weights (p, 1-p).  Amplitude is clamped into [0, 1) since the
    search perturbs it without a constraining transform.
    """
    a = np.clip(amplitude, 0.0, 1.0 - 1e-6)
    p = calendar.term_frac
    if calendar.is_term(t):
        return (1.0 + a * (1.0 - p) / p) * mean_beta
    return (1.0 - a) * mean_beta


# ---------------------------------------------------------------------------
# Gravity coupling


def travel_matrix(gravity, mean_pop, distances) -> np.ndarray:
    """Travel volumes v[u, v] = G_u * (dbar / pbar^2) * p_u p_v / d_uv.

    ``gravity`` may be (U,) or (J, U); the result gains the extra leading
    axis.  dbar and pbar are the average off-diagonal distance and average
    population.  The diagonal is zero.
    """
    mean_pop = np.asarray(mean_pop, dtype=float)
    distances = np.asarray(distances, dtype=float)
    gravity = np.asarray(gravity, dtype=float)
    U = len(mean_pop)
    if U == 1:
        return np.zeros(gravity.shape + (1,))
    off = ~np.eye(U, dtype=bool)
    if np.any(distances[off] <= 0):
        raise ValueError("off-diagonal distances must be positive")
    dbar = distances[off].mean()
    pbar = mean_pop.mean()
    weight = (dbar / pbar**2) * np.outer(mean_pop, mean_pop)
    weight = weight / np.where(off, distances, 1.0)
    weight[~off] = 0.0
    return gravity[..., :, None] * weight


def _mixing_bracket(infectious, pop, alpha, iota, travel):
    """Per-unit mixing term of the transmission hazard; may go negative."""
    infectious = np.asarray(infectious, dtype=float)
    prev = infectious / pop
    frac_self = ((infectious + iota) / pop) ** alpha
    if travel is None:
        return frac_self
    frac_own = prev ** alpha
    cross = prev[..., None, :] ** alpha[..., :, None]  # [..., u, v] = prev_v^alpha_u
    coupling = (travel * (cross - frac_own[..., :, None])).sum(axis=-1) / pop
    return frac_self + coupling


def infection_rate(infectious, pop, beta, alpha, iota=0.0, travel=None) -> np.ndarray:
    """Pre-noise susceptible-to-exposed hazard rate, clamped at zero.

    Units follow ``beta``.  ``travel`` is the matrix from
    :func:`travel_matrix` (or None for an uncoupled model).
    """
    bracket = _mixing_bracket(infectious, pop, np.asarray(alpha, dtype=float), iota, travel)
    return np.asarray(beta) * np.maximum(bracket, 0.0)


# ---------------------------------------------------------------------------
# Measurement model


def report_logpmf(y, z, rho, psi):
    """Log probability of case report y given z removals.

    Reports are a discretized Gaussian with mean rho*z and variance
    rho(1-rho)z + psi^2 rho^2 z^2: mass on y >= 1 is the CDF increment over
    (y-1/2, y+1/2] and y = 0 absorbs the entire lower tail.  At z = 0 the
    variance is floored at 1 to keep the mass function proper; a genuinely
    degenerate case (variance 0 with z > 0) puts unit mass at rho*z.
    Missing y (NaN) has log probability 0.
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(y[~np.isnan(y)] < 0):
        raise ValueError("case reports must be non-negative")
    y, z, rho, psi = np.broadcast_arrays(y, z, rho, psi)
    mean = rho * z
    var = rho * (1.0 - rho) * z + psi**2 * rho**2 * z**2
    var = np.where(z == 0, np.maximum(var, 1.0), var)
    degenerate = var <= 0
    sd = np.sqrt(np.where(degenerate, 1.0, var))
    upper = ndtr((y + 0.5 - mean) / sd)
    lower = np.where(y <= 0, 0.0, ndtr((y - 0.5 - mean) / sd))
    prob = np.clip(upper - lower, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        out = np.log(prob)
    out = np.where(degenerate, np.where(np.rint(mean) == y, 0.0, -np.inf), out)
    return np.where(np.isnan(y), 0.0, out)


def simulate_reports(z, rho, psi, rng: np.random.Generator) -> np.ndarray:
    """Draw case reports from the report distribution (clamped at zero)."""
    z = np.asarray(z, dtype=float)
    z, rho, psi = np.broadcast_arrays(z, rho, psi)
    mean = rho * z
    var = rho * (1.0 - rho) * z + psi**2 * rho**2 * z**2
    var = np.where(z == 0, np.maximum(var, 1.0), var)
    degenerate = var <= 0
    draw = rng.normal(mean, np.sqrt(np.where(degenerate, 0.0, var)))
    draw = np.where(degenerate, mean, draw)
    return np.maximum(np.rint(draw), 0.0).astype(np.int64)


# ---------------------------------------------------------------------------
# Covariates


@dataclass
class MeaslesCovariates:
    """Annual population and birth series per town, distances, and calendar.

    Series are linearly interpolated in time (constant beyond the ends);
    birth rates are read with a four-year lag by the model, so the years
    should start at least that far before the simulation origin.
    """

    units: tuple[str, ...]
    years: np.ndarray
    population: np.ndarray  # (U, Y)
    births: np.ndarray  # (U, Y) births per year
    distances: np.ndarray  # (U, U) km
    calendar: SchoolCalendar = SchoolCalendar()

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=float)
        self.population = np.asarray(self.population, dtype=float)
        self.births = np.asarray(self.births, dtype=float)
        self.distances = np.asarray(self.distances, dtype=float)
        U = len(self.units)
        Y = len(self.years)
        if self.population.shape != (U, Y) or self.births.shape != (U, Y):
            raise ValueError("population and births must be (U, n_years)")
        if np.any(np.diff(self.years) <= 0):
            raise ValueError("years must be strictly increasing")
        if np.any(self.population <= 0):
            raise ValueError("populations must be positive")
        if self.distances.shape != (U, U):
            raise ValueError("distances must be U x U")
        if np.any(np.diag(self.distances) != 0):
            raise ValueError("distance diagonal must be zero")
        if not np.allclose(self.distances, self.distances.T):
            raise ValueError("distances must be symmetric")
        if U > 1:
            off = ~np.eye(U, dtype=bool)
            if np.any(self.distances[off] <= 0):
                raise ValueError("off-diagonal distances must be positive")
        self.mean_pop = self.population.mean(axis=1)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def _interp(self, table: np.ndarray, t: float) -> np.ndarray:
        years = self.years
        if t <= years[0]:
            return table[:, 0]
        if t >= years[-1]:
            return table[:, -1]
        i = int(np.searchsorted(years, t))
        w = (t - years[i - 1]) / (years[i] - years[i - 1])
        return (1.0 - w) * table[:, i - 1] + w * table[:, i]

    def pop_at(self, t: float) -> np.ndarray:
        return self._interp(self.population, t)

    def birth_rate_at(self, t: float) -> np.ndarray:
        return self._interp(self.births, t)


def demo_covariates(
    n_units: int,
    seed: int = 0,
    years: tuple[int, int] = (1935, 1975),
    top_pop: float = 2e6,
    bottom_pop: float = 1e5,
    birth_frac: float = 0.017,
) -> MeaslesCovariates:
    """Synthetic town covariates for tests and demonstrations.

    Town sizes are log-spaced and constant in time; births are a fixed
    per-capita fraction; distances are a deterministic random symmetric
    matrix.  Real analyses load covariates from files instead.
    """
    rng = np.random.default_rng(seed)
    yrs = np.arange(years[0], years[1] + 1, dtype=float)
    if n_units == 1:
        pops = np.array([top_pop])
    else:
        pops = np.geomspace(top_pop, bottom_pop, n_units)
    population = np.repeat(pops[:, None], len(yrs), axis=1)
    births = birth_frac * population
    d = rng.uniform(30.0, 300.0, size=(n_units, n_units))
    d = (d + d.T) / 2.0
    np.fill_diagonal(d, 0.0)
    units = tuple(f"town{u:02d}" for u in range(n_units))
    return MeaslesCovariates(units, yrs, population, births, d)


def save_covariates(dirpath, cov: MeaslesCovariates) -> None:
    """Write population.csv, births.csv, distances.csv, calendar.json."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    U, Y = cov.population.shape
    long = {
        "unit": np.repeat(list(cov.units), Y),
        "year": np.tile(cov.years, U),
    }
    pd.DataFrame({**long, "population": cov.population.ravel()}).to_csv(
        dirpath / "population.csv", index=False
    )
    pd.DataFrame({**long, "births": cov.births.ravel()}).to_csv(
        dirpath / "births.csv", index=False
    )
    rows = [
        (cov.units[a], cov.units[b], cov.distances[a, b])
        for a in range(U)
        for b in range(a + 1, U)
    ]
    pd.DataFrame(rows, columns=["unit_a", "unit_b", "km"]).to_csv(
        dirpath / "distances.csv", index=False
    )
    (dirpath / "calendar.json").write_text(cov.calendar.to_json() + "\n")


def load_covariates(dirpath) -> MeaslesCovariates:
    dirpath = Path(dirpath)
    pop = pd.read_csv(dirpath / "population.csv")
    births = pd.read_csv(dirpath / "births.csv")
    units = tuple(dict.fromkeys(pop["unit"]))
    years = np.sort(pop["year"].unique()).astype(float)
    pop_tab = pop.pivot(index="unit", columns="year", values="population")
    birth_tab = births.pivot(index="unit", columns="year", values="births")
    U = len(units)
    dist = np.zeros((U, U))
    index = {u: i for i, u in enumerate(units)}
    for _, row in pd.read_csv(dirpath / "distances.csv").iterrows():
        a, b = index[row["unit_a"]], index[row["unit_b"]]
        dist[a, b] = dist[b, a] = float(row["km"])
    calendar_path = dirpath / "calendar.json"
    calendar = (
        SchoolCalendar.from_json(calendar_path.read_text())
        if calendar_path.exists()
        else SchoolCalendar()
    )
    return MeaslesCovariates(
        units,
        years,
        pop_tab.loc[list(units)].to_numpy(dtype=float),
        birth_tab.loc[list(units)].to_numpy(dtype=float),
        dist,
        calendar,
    )


# ---------------------------------------------------------------------------
# Parameter vocabulary and submodels


PARAM_ORDER = (
    "R0", "mu_EI", "mu_IR", "rho", "psi", "sigma_SE", "G", "iota",
    "amplitude", "alpha", "cohort", "pS0", "pE0", "pI0",
)

_TRANSFORM = {
    "R0": "log", "mu_EI": "log", "mu_IR": "log", "rho": "logit", "psi": "log",
    "sigma_SE": "log", "G": "log", "iota": "log", "amplitude": "identity",
    "alpha": "log", "cohort": "identity", "pS0": "logit", "pE0": "logit",
    "pI0": "logit",
}

_IVP = frozenset({"pS0", "pE0", "pI0"})

# Values used to generate the reference simulated panel (all shared).
SIM_TRUTH = {
    "R0": 30.0, "mu_EI": 1.0, "mu_IR": 1.0, "rho": 0.5, "psi": 0.15,
    "sigma_SE": 0.15, "G": 400.0, "iota": 0.0, "amplitude": 0.5, "alpha": 1.0,
    "cohort": 0.0, "pS0": 0.032, "pE0": 5e-5, "pI0": 4e-5,
}


def measles_layout(tag: str, n_units: int) -> ParameterLayout:
    """Parameter layout for submodel A, B, or C.

    A: reporting rate and the three initial fractions are unit-specific,
    the other nine entries shared; gravity coupling; no immigration.
    B: all entries unit-specific; gravity coupling; no immigration.
    C: all entries unit-specific; no coupling (G structurally zero) but an
    estimated immigration rate of infections.
    """
    tag = tag.upper()
    if tag == "A":
        skip, unit_specific = {"iota"}, {"rho", "pS0", "pE0", "pI0"}
    elif tag == "B":
        skip, unit_specific = {"iota"}, set(PARAM_ORDER)
    elif tag == "C":
        skip, unit_specific = {"G"}, set(PARAM_ORDER)
    else:
        raise ValueError(f"unknown submodel tag {tag!r}; expected A, B, or C")
    entries = [
        ParamSpec(
            name,
            kind="unit_specific" if name in unit_specific else "shared",
            transform=_TRANSFORM[name],
            ivp=name in _IVP,
        )
        for name in PARAM_ORDER
        if name not in skip
    ]
    return ParameterLayout(entries, n_units)


def theta_from_dict(layout: ParameterLayout, values: dict[str, float]) -> np.ndarray:
    """Flat vector from per-name values (unit-specific entries replicated)."""
    theta = np.empty(layout.flat_dim)
    n_sh = len(layout.shared_cols)
    for k, d in enumerate(layout.shared_cols):
        theta[k] = values[layout.entries[d].name]
    n_un = len(layout.unit_cols)
    for u in range(layout.n_units):
        for k, d in enumerate(layout.unit_cols):
            theta[n_sh + u * n_un + k] = values[layout.entries[d].name]
    return theta


# ---------------------------------------------------------------------------
# The dynamic model


class MeaslesModel(Model):
    """SEIR metapopulation dynamics satisfying the plug-in model contract.

    States per unit are integer (S, E, I, C) where C accumulates removals
    within the current reporting interval and is reset after each
    measurement.  Missing parameter columns (immigration for the coupled
    submodels, gravity for the uncoupled one) are structural zeros.
    """

    state_names = ("S", "E", "I", "C")
    accum_vars = (3,)

    def __init__(
        self,
        layout: ParameterLayout,
        covariates: MeaslesCovariates,
        t0: float | None = None,
        mu_death: float = 1.0 / 50.0,
        birth_delay: float = 4.0,
    ):
        if layout.n_units != covariates.n_units:
            raise ValueError("layout and covariates disagree on the unit count")
        self.layout = layout
        self.covariates = covariates
        self.t0 = float(t0) if t0 is not None else float(covariates.years[0])
        self.mu_death = float(mu_death)  # per year, all compartments
        self.birth_delay = float(birth_delay)
        self.clamp_events = 0  # diagnostic count of negative mixing brackets
        self._cols = {name: layout.index(name) for name in layout.names}
        self._i_G = self._cols.get("G")
        self._i_iota = self._cols.get("iota")
        if self._i_G is not None:
            # Gravity weights are time-invariant: they use time-averaged
            # populations.  Only the G factor varies with the parameters.
            self._travel_weight = travel_matrix(
                np.ones(covariates.n_units), covariates.mean_pop, covariates.distances
            )
        else:
            self._travel_weight = None

    def _col(self, params: np.ndarray, name: str) -> np.ndarray:
        return params[..., self._cols[name]]

    def rinit(self, params, rng):
        pop0 = self.covariates.pop_at(self.t0)
        p_s = self._col(params, "pS0")
        p_e = self._col(params, "pE0")
        p_i = self._col(params, "pI0")
        if np.any(p_s + p_e + p_i > 1.0):
            raise ValueError("initial fractions pS0 + pE0 + pI0 exceed 1")
        out = np.zeros(params.shape[:2] + (4,), dtype=np.int64)
        out[..., 0] = np.rint(p_s * pop0)
        out[..., 1] = np.rint(p_e * pop0)
        out[..., 2] = np.rint(p_i * pop0)
        return out

    def dmeasure(self, y, states, params):
        z = states[..., 3].astype(float)
        return report_logpmf(
            np.asarray(y, dtype=float)[None, :],
            z,
            self._col(params, "rho"),
            self._col(params, "psi"),
        )

    def rmeasure(self, states, params, rng):
        return simulate_reports(
            states[..., 3].astype(float),
            self._col(params, "rho"),
            self._col(params, "psi"),
            rng,
        )

    def step(self, states, params, t, dt, rng):
        if dt > 7.0 / 365.25 + 1e-12:
            raise ValueError("process step must not exceed one week")
        S = states[..., 0]
        E = states[..., 1]
        I = states[..., 2]
        C = states[..., 3]
        pop = self.covariates.pop_at(t)

        mu_ei = self._col(params, "mu_EI") * WEEKS_PER_YEAR  # per year
        mu_ir = self._col(params, "mu_IR") * WEEKS_PER_YEAR
        mu_d = self.mu_death

        # Seasonal transmission.  R0 parameterizes the mean rate through
        # the infectious exit hazard (weekly units).
        mean_beta_wk = self._col(params, "R0") * (
            self._col(params, "mu_IR") + mu_d / WEEKS_PER_YEAR
        )
        beta_yr = (
            seasonal_beta(
                t, mean_beta_wk, self._col(params, "amplitude"), self.covariates.calendar
            )
            * WEEKS_PER_YEAR
        )

        iota = self._col(params, "iota") if self._i_iota is not None else 0.0
        alpha = self._col(params, "alpha")
        if self._travel_weight is not None:
            travel = self._col(params, "G")[..., :, None] * self._travel_weight
        else:
            travel = None
        bracket = _mixing_bracket(I.astype(float), pop, alpha, iota, travel)
        neg = bracket < 0
        if neg.any():
            self.clamp_events += int(neg.sum())
            bracket = np.maximum(bracket, 0.0)

        # Multiplicative gamma noise on the integrated transmission hazard:
        # mean dt, variance sigma_SE^2 * dt.
        sig2 = self._col(params, "sigma_SE") ** 2
        noisy = sig2 > 0
        safe = np.where(noisy, sig2, 1.0)
        gamma_dt = rng.gamma(dt / safe, safe)
        gamma_dt = np.where(noisy, gamma_dt, dt)

        h_se = beta_yr * bracket * gamma_dt  # integrated hazard over the step
        h_sd = mu_d * dt
        n_se, n_sd = _competing_draw(S, h_se, h_sd, rng)
        n_ei, n_ed = _competing_draw(E, mu_ei * dt, h_sd, rng)
        n_ir, n_id = _competing_draw(I, mu_ir * dt, h_sd, rng)

        cohort = np.clip(self._col(params, "cohort"), 0.0, 1.0)
        lagged = self.covariates.birth_rate_at(t - self.birth_delay)
        cont = (1.0 - cohort) * lagged * dt
        n_birth = _stochastic_round(cont, rng)
        admission = math.floor(t) + SCHOOL_ADMISSION_DAY
        if t <= admission < t + dt:
            pulse_rate = self.covariates.birth_rate_at(admission - self.birth_delay)
            n_birth = n_birth + _stochastic_round(cohort * pulse_rate, rng)

        out = np.empty_like(states)
        out[..., 0] = S + n_birth - n_se - n_sd
        out[..., 1] = E + n_se - n_ei - n_ed
        out[..., 2] = I + n_ei - n_ir - n_id
        out[..., 3] = C + n_ir
        if (out < 0).any():
            raise RuntimeError("negative compartment after update (hazard accounting bug)")
        return out


def _competing_draw(n, h1, h2, rng):
    """Split compartment n between two exits with integrated hazards h1, h2.

    Each exit i receives a share h_i / (h1 + h2) of the leavers, whose
    total count is binomial with probability 1 - exp(-(h1 + h2)).
    """
    total = h1 + h2
    p_leave = -np.expm1(-total)
    leavers = rng.binomial(n, np.clip(p_leave, 0.0, 1.0))
    frac = np.divide(h1, total, out=np.zeros_like(total + 0.0), where=total > 0)
    first = rng.binomial(leavers, np.clip(frac, 0.0, 1.0))
    return first, leavers - first


def _stochastic_round(x, rng):
    """Integerize non-negative reals preserving the mean."""
    base = np.floor(x)
    return (base + (rng.random(np.shape(x)) < (x - base))).astype(np.int64)


def build_submodel(tag: str, covariates: MeaslesCovariates, **model_kwargs):
    """(layout, model) pair for submodel A, B, or C over the given towns."""
    layout = measles_layout(tag, covariates.n_units)
    return layout, MeaslesModel(layout, covariates, **model_kwargs)
