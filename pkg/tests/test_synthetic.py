import dataclasses
import io
import math

import numpy as np
import pytest

from excessms.expected import fit_expected
from excessms.msm import DAYS_PER_YEAR, build_tmat_illness_death_partitioned, load_wide
from excessms.simulate import SimConfig, simulate, transition_probabilities
from excessms.splines import KnotVector, SplineSpec
from excessms.synthetic import (
    SyntheticTruth,
    draw_cohort,
    make_rate_table,
    population_rate,
    truth_models,
    write_cohort_days,
)


def total_cumhaz(truth, t, female, a0, c0):
    A = population_rate(truth, a0, c0, female)
    k = truth.p_age + truth.p_year
    h_exp = A * np.expm1(k * t) / k
    lin = lambda b0, b1, bf, ba, bc: np.exp(b0 + b1 * math.log(t) + bf * female + ba * a0 + bc * (c0 - 2000.0))
    t_ = truth
    return h_exp + lin(t_.e0, t_.e1, t_.e_f, t_.e_a, t_.e_c) + lin(t_.d0, t_.d1, t_.d_f, t_.d_a, t_.d_c)


def test_first_event_fraction_matches_closed_form():
    # no censoring before 5 years: the share with a first event by t=5
    # averages 1 - exp(-H_total) over the drawn covariates
    truth = SyntheticTruth(n_patients=60_000, loss_rate=1e-9, study_end=3000.0)
    recs = draw_cohort(truth, np.random.default_rng(31))
    t = 5.0
    first = np.array([min(r.events.values(), default=np.inf) for r in recs])
    cov = np.array([[r.covariates["female"], r.covariates["a0"], r.covariates["c0"]] for r in recs])
    p = 1.0 - np.exp(-total_cumhaz(truth, t, cov[:, 0], cov[:, 1], cov[:, 2]))
    # event times are rounded up to whole days
    observed = np.mean(first <= t + 1.0 / DAYS_PER_YEAR)
    se = math.sqrt(np.mean(p * (1 - p)) / len(recs))
    assert abs(observed - p.mean()) < 4 * se


def test_cohort_layout_and_days_roundtrip():
    truth = SyntheticTruth(n_patients=300)
    recs = draw_cohort(truth, np.random.default_rng(32))
    assert len(recs) == 300
    for r in recs:
        assert set(r.events) <= {"ill", "dead"}
        assert all(0 < v <= r.censor_time + 1e-12 for v in r.events.values())
        if "ill" in r.events and "dead" in r.events:
            assert r.events["dead"] > r.events["ill"]
        assert 18 <= r.covariates["a0"] <= 85
        assert truth.first_year <= r.covariates["c0"] <= truth.last_year
    buf = io.StringIO()
    write_cohort_days(recs, buf)
    buf.seek(0)
    again = load_wide(buf, scale=DAYS_PER_YEAR)
    for a, b in zip(recs, again):
        assert a.events.keys() == b.events.keys()
        assert all(a.events[k] == pytest.approx(b.events[k], abs=1e-9) for k in a.events)
        assert a.censor_time == pytest.approx(b.censor_time, abs=1e-9)


def test_rate_table_recovers_log_linear_truth():
    truth = SyntheticTruth()
    table = make_rate_table(truth, np.random.default_rng(33))
    assert len(table) == 51 * 86 * 2
    age = SplineSpec(KnotVector((20.0, 50.0, 95.0)))
    year = SplineSpec(KnotVector((1972.0, 2018.0)))
    m = fit_expected(table, age, year, ["female=sex:2"])
    se = np.sqrt(np.diag(m.vcov))
    # first spline column is the raw variable, the second must vanish
    for idx, true in ((1, truth.p_age), (2, 0.0), (3, truth.p_year), (4, truth.p_f)):
        assert abs(m.beta[idx] - true) < 4 * se[idx]


def test_truth_models_give_closed_form_survival():
    truth = SyntheticTruth()
    at = {"female": 1.0, "a0": 45.0, "c0": 2001.0}
    grid = np.array([1.0, 5.0, 10.0, 15.0])
    n = 200_000
    s = simulate(truth_models(truth), build_tmat_illness_death_partitioned(), at, SimConfig(n_point=n, seed=34, threads=1))
    p = transition_probabilities(s, grid).series("alive")
    exact = np.exp(-np.array([total_cumhaz(truth, t, 1.0, 45.0, 2001.0) for t in grid]))
    assert np.all(np.abs(p - exact) < 3 * np.sqrt(exact * (1 - exact) / n) + 1e-12)


def test_truth_dataclass_roundtrip():
    t = SyntheticTruth(e0=-5.0)
    assert SyntheticTruth(**t.to_dict()) == t
    assert dataclasses.replace(t, n_patients=10).n_patients == 10
