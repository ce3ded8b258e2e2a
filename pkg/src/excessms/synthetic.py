"""Synthetic cohort and population table with known hazards.

The cohort mimics a lymphoma register: patients diagnosed 1985-2015 at a
bimodal age, followed for a second cancer (``ill``) and death. Every
hazard has a closed-form inverse, so event times are drawn directly
without the simulation engine.

Truth, with ``f`` the female indicator, ``a0`` age and ``c0`` calendar
year at diagnosis, ``t`` years since diagnosis and ``u`` years since the
second cancer:

* population rate ``h*(age, year, f) = exp(p0 + p_age age + p_year (year - 2000) + p_f f)``
* excess ``Lambda(t) = exp(e0 + e1 log t + e_f f + e_a a0 + e_c (c0 - 2000))``
* death before illness, same form with the ``d`` coefficients
* death after illness, on ``u``, same form with the ``q`` coefficients
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .expected import RateTable
from .flexsurv import fixed_model
from .msm import DAYS_PER_YEAR, WideRecord, write_wide


@dataclass(frozen=True)
class SyntheticTruth:
    p0: float = -10.0
    p_age: float = 0.08
    p_year: float = -0.01
    p_f: float = -0.2

    e0: float = -6.0
    e1: float = 1.2
    e_f: float = 0.3
    e_a: float = 0.02
    e_c: float = -0.02

    d0: float = -5.5
    d1: float = 0.8
    d_f: float = -0.2
    d_a: float = 0.05
    d_c: float = -0.02

    q0: float = -3.0
    q1: float = 0.6
    q_f: float = 0.0
    q_a: float = 0.03
    q_c: float = 0.0

    n_patients: int = 4000
    p_female: float = 0.45
    first_year: float = 1985.0
    last_year: float = 2015.0
    study_end: float = 2018.0
    max_followup: float = 20.0
    loss_rate: float = 0.01

    table_years: tuple[int, int] = (1970, 2020)
    table_ages: tuple[int, int] = (15, 100)
    person_years: float = 30000.0

    def to_dict(self) -> dict:
        return asdict(self)


def population_rate(truth: SyntheticTruth, age, year, female) -> np.ndarray:
    return np.exp(truth.p0 + truth.p_age * np.asarray(age) + truth.p_year * (np.asarray(year) - 2000.0) + truth.p_f * np.asarray(female))


def make_rate_table(truth: SyntheticTruth, rng: np.random.Generator) -> RateTable:
    """Poisson counts on a full year x sex x age grid (sex 1 male, 2 female)."""
    years = np.arange(truth.table_years[0], truth.table_years[1] + 1)
    ages = np.arange(truth.table_ages[0], truth.table_ages[1] + 1)
    Y, S, A = (g.ravel() for g in np.meshgrid(years, (1, 2), ages, indexing="ij"))
    # mid-interval rates for the one-year cells
    mu = truth.person_years * population_rate(truth, A + 0.5, Y + 0.5, S == 2)
    d = rng.poisson(mu).astype(float)
    return RateTable(Y.astype(np.int64), S.astype(np.int64), A.astype(np.int64), d, np.full(Y.size, truth.person_years))


def _weibull_times(E, c, shape):
    """Solve ``exp(c + shape log t) = E`` for t."""
    return np.exp((np.log(E) - c) / shape)


def draw_cohort(truth: SyntheticTruth, rng: np.random.Generator) -> list[WideRecord]:
    """Patients in wide format with event times rounded up to whole days."""
    n = truth.n_patients
    female = (rng.random(n) < truth.p_female).astype(float)
    young = rng.random(n) < 0.6
    a0 = np.where(young, rng.normal(30.0, 8.0, n), rng.normal(65.0, 10.0, n))
    a0 = np.round(np.clip(a0, 18.0, 85.0), 2)
    c0 = np.round(rng.uniform(truth.first_year, truth.last_year, n), 3)
    E = rng.exponential(size=(n, 4))

    # expected component: Gompertz in t, A exp(k t)
    A = population_rate(truth, a0, c0, female)
    k = truth.p_age + truth.p_year
    t_exp = np.log1p(k * E[:, 0] / A) / k
    cov_e = truth.e0 + truth.e_f * female + truth.e_a * a0 + truth.e_c * (c0 - 2000.0)
    t_exc = _weibull_times(E[:, 1], cov_e, truth.e1)
    cov_d = truth.d0 + truth.d_f * female + truth.d_a * a0 + truth.d_c * (c0 - 2000.0)
    t_dead = _weibull_times(E[:, 2], cov_d, truth.d1)
    cov_q = truth.q0 + truth.q_f * female + truth.q_a * a0 + truth.q_c * (c0 - 2000.0)
    u_dead = _weibull_times(E[:, 3], cov_q, truth.q1)

    t_ill = np.minimum(t_exp, t_exc)
    censor = np.minimum(np.minimum(truth.study_end - c0, truth.max_followup), rng.exponential(1.0 / truth.loss_rate, n))

    def day(t):
        return max(1, math.ceil(t * DAYS_PER_YEAR))

    out = []
    for i in range(n):
        cov = {"female": float(female[i]), "a0": float(a0[i]), "c0": float(c0[i])}
        end = day(censor[i])
        events = {}
        if t_ill[i] < t_dead[i] and t_ill[i] <= censor[i]:
            d_ill = min(day(t_ill[i]), end)
            events["ill"] = d_ill
            t_d = t_ill[i] + u_dead[i]
            if t_d <= censor[i]:
                events["dead"] = max(day(t_d), d_ill + 1)
                end = events["dead"]
        elif t_dead[i] <= censor[i]:
            events["dead"] = day(t_dead[i])
            end = events["dead"]
        out.append(WideRecord(i + 1, {k: v / DAYS_PER_YEAR for k, v in events.items()}, end / DAYS_PER_YEAR, cov))
    return out


def write_cohort_days(records, fh) -> None:
    """Wide CSV with times in days, as registers usually deliver them."""
    buf = io.StringIO()
    scaled = [
        WideRecord(
            r.id,
            {k: round(v * DAYS_PER_YEAR) for k, v in r.events.items()},
            round(r.censor_time * DAYS_PER_YEAR),
            r.covariates,
        )
        for r in records
    ]
    write_wide(scaled, buf)
    fh.write(buf.getvalue())


class GompertzExpected:
    """True expected hazard for one pattern, ``A exp(k t)``."""

    resample = False

    def __init__(self, truth: SyntheticTruth):
        self.truth = truth

    @property
    def parameters(self) -> np.ndarray:
        return np.zeros(0)

    def curve(self, at, horizon, params=None):
        A = float(population_rate(self.truth, at["a0"], at["c0"], at["female"]))
        return _Gompertz(A, self.truth.p_age + self.truth.p_year)


class _Gompertz:
    def __init__(self, A: float, k: float):
        self.A, self.k = A, k

    def hazard(self, t):
        return self.A * np.exp(self.k * np.asarray(t, dtype=float))

    def cumhaz(self, t):
        return self.A * np.expm1(self.k * np.asarray(t, dtype=float)) / self.k

    def both(self, t):
        return self.cumhaz(t), self.hazard(t)

    def is_monotone(self) -> bool:
        return True


def truth_models(truth: SyntheticTruth) -> dict:
    """Slot models of the partitioned illness-death matrix under the truth."""
    names = ("female", "a0", "c0")

    def weib(c, shape, bf, ba, bc, kind="all_cause", clock="forward"):
        return fixed_model((-5.0, 5.0), (c - 2000.0 * bc, shape), (bf, ba, bc), names, kind=kind, clock=clock)

    t = truth
    return {
        "expected": GompertzExpected(t),
        "excess": weib(t.e0, t.e1, t.e_f, t.e_a, t.e_c, kind="excess"),
        "death": weib(t.d0, t.d1, t.d_f, t.d_a, t.d_c),
        "post_illness_death": weib(t.q0, t.q1, t.q_f, t.q_a, t.q_c, clock="reset"),
    }
