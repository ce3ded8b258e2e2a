import math

import numpy as np
import pytest
from scipy import stats

from excessms.errors import ConfigError, SchemaError
from excessms.flexsurv import (
    FlexParamSpec,
    SplineTerm,
    SurvivalData,
    SurvivalRecord,
    cumhaz,
    draw_event_time,
    draw_event_times,
    dumps,
    fit_flexparam,
    fixed_model,
    hazard,
    load_model,
    loglik_gradient,
    loglik_hessian,
    mvn_factor,
    sample_parameters,
    save_model,
    survival,
)
from excessms.splines import KnotVector


def weibull_data(n, shape=1.3, scale=1.0, rate=0.0, delayed=False, censor=None, seed=0, beta=0.0):
    """Event times from expected rate ``rate`` plus a Weibull (excess) hazard."""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    entry = rng.uniform(0, 0.5, n) if delayed else np.zeros(n)
    # Weibull conditional on survival to entry: H(T) = H(entry) + E
    H0 = (entry / scale) ** shape * np.exp(beta * x)
    t_exc = scale * ((H0 + rng.exponential(size=n)) * np.exp(-beta * x)) ** (1 / shape)
    t = t_exc
    if rate > 0:
        t = np.minimum(t, entry + rng.exponential(1 / rate, n))
    c = np.full(n, np.inf) if censor is None else entry + rng.uniform(0, censor, n)
    exit_ = np.minimum(t, c)
    status = (t <= c).astype(np.int64)
    return SurvivalData(entry, exit_, status, {"x": x}, np.full(n, rate))


@pytest.fixture(scope="module")
def weibull20k():
    return weibull_data(20000, seed=1)


def test_df1_recovers_weibull_shape(weibull20k):
    m = fit_flexparam(weibull20k, FlexParamSpec(df=1))
    se = math.sqrt(m.vcov[1, 1])
    assert abs(m.gamma[1] - 1.3) < 3 * se
    assert abs(m.gamma[0]) < 3 * math.sqrt(m.vcov[0, 0])
    assert m.flags["hessian_negative_definite"]


def test_excess_with_zero_rate_equals_all_cause():
    data = weibull_data(3000, delayed=True, censor=3.0, seed=2)
    a = fit_flexparam(data, FlexParamSpec(df=3, covariates=("x",)))
    e = fit_flexparam(data, FlexParamSpec(df=3, covariates=("x",), kind="excess"))
    assert np.max(np.abs(a.parameters - e.parameters)) < 1e-8


def fd_gradient(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h * max(1.0, abs(theta[j]))
        g[j] = (f(theta + e) - f(theta - e)) / (2 * e[j])
    return g


def feasible_points(m, data, rng, k, size=0.05):
    """Random points near the fit where the hazard is positive at every event."""
    out = []
    while len(out) < k:
        theta = m.parameters + rng.normal(0, size, m.parameters.size)
        if np.isfinite(loglik_gradient(m, data, theta)[0]):
            out.append(theta)
    return out


@pytest.mark.parametrize("kind", ["all_cause", "excess"])
@pytest.mark.parametrize("delayed", [False, True])
def test_gradient_matches_finite_differences(kind, delayed):
    data = weibull_data(2000, rate=0.3 if kind == "excess" else 0.0, delayed=delayed, censor=4.0, seed=3, beta=0.4)
    m = fit_flexparam(data, FlexParamSpec(df=3, covariates=("x",), kind=kind))
    rng = np.random.default_rng(4)
    for theta in feasible_points(m, data, rng, 5):
        ll, g = loglik_gradient(m, data, theta)
        g_fd = fd_gradient(lambda th: loglik_gradient(m, data, th)[0], theta)
        # relative to the gradient's size; components near zero are judged on that scale
        assert np.max(np.abs(g - g_fd)) <= 1e-5 * np.max(np.abs(g))
        _, _, H = loglik_hessian(m, data, theta)
        H_fd = np.array([fd_gradient(lambda th: loglik_gradient(m, data, th)[1][j], theta) for j in range(theta.size)])
        assert np.max(np.abs(H - H_fd)) <= 1e-5 * np.max(np.abs(H))


def test_gradient_with_spline_covariate():
    rng = np.random.default_rng(8)
    data = weibull_data(1500, delayed=True, censor=3.0, seed=8)
    age = rng.uniform(40, 80, len(data))
    data = SurvivalData(data.entry, data.exit, data.status, {"x": data.covariates["x"], "age": age})
    # orthogonalised columns keep finite-difference steps on a common scale
    m = fit_flexparam(data, FlexParamSpec(df=2, covariates=("x",), splines=(SplineTerm("age", 3),), orthogonalize=True))
    assert len(m.beta) == 4
    (theta,) = feasible_points(m, data, rng, 1, 0.03)
    _, g = loglik_gradient(m, data, theta)
    g_fd = fd_gradient(lambda th: loglik_gradient(m, data, th)[0], theta)
    assert np.max(np.abs(g - g_fd)) <= 1e-5 * np.max(np.abs(g))


def test_optimum_is_local_maximum():
    data = weibull_data(2000, rate=0.2, delayed=True, censor=3.0, seed=5, beta=0.5)
    m = fit_flexparam(data, FlexParamSpec(df=3, covariates=("x",), kind="excess"))
    ll0, g = loglik_gradient(m, data, m.parameters)
    assert ll0 == pytest.approx(m.loglik, rel=1e-12)
    assert np.abs(g).max() < 1e-5
    rng = np.random.default_rng(6)
    for _ in range(100):
        d = rng.normal(size=m.parameters.size)
        d *= 0.1 / np.linalg.norm(d)
        assert loglik_gradient(m, data, m.parameters + d)[0] <= m.loglik


def test_nested_df_loglik_monotone():
    data = weibull_data(4000, delayed=True, censor=3.0, seed=7)
    lt = np.log(data.exit[data.status == 1])
    ll = []
    # knot sets at 0/100, +50, +25/75 and +12.5.. centiles are nested
    for df in (1, 2, 4, 8):
        m = fit_flexparam(data, FlexParamSpec(df=df))
        ll.append(m.loglik)
        assert m.baseline_knots.knots[0] == lt.min()
    assert all(b >= a - 1e-6 for a, b in zip(ll, ll[1:]))


def test_orthogonalization_invariance():
    data = weibull_data(3000, rate=0.1, censor=4.0, seed=9, beta=0.3)
    spec = FlexParamSpec(df=4, covariates=("x",), kind="excess")
    a = fit_flexparam(data, spec)
    b = fit_flexparam(data, FlexParamSpec(df=4, covariates=("x",), kind="excess", orthogonalize=True))
    assert a.loglik == pytest.approx(b.loglik, abs=1e-6)
    t = np.array([0.1, 0.5, 1.0, 2.0, 3.5])
    np.testing.assert_allclose(cumhaz(a, t, {"x": 1}), cumhaz(b, t, {"x": 1}), rtol=1e-6)
    assert a.beta[0] == pytest.approx(b.beta[0], abs=1e-6)


def test_weibull_closed_form():
    m = fixed_model((0.0, 1.0), (math.log(0.2), 1.0))
    assert cumhaz(m, 5.0) == pytest.approx(1.0, rel=1e-14)
    assert survival(m, 5.0) == pytest.approx(math.exp(-1), rel=1e-14)
    assert cumhaz(m, 0.0) == 0.0 and survival(m, 0.0) == 1.0
    assert hazard(m, 3.0) == pytest.approx(0.2, rel=1e-14)


def test_hazard_is_derivative_of_cumhaz():
    m = fixed_model((-2.0, -0.5, 0.5, 1.5), (-1.0, 1.2, 0.05, -0.03), (0.4,), ("x",))
    for t in (0.05, 0.3, 1.0, 2.7, 10.0):
        h = 1e-6 * t
        fd = (cumhaz(m, t + h, {"x": 1}) - cumhaz(m, t - h, {"x": 1})) / (2 * h)
        assert hazard(m, t, {"x": 1}) == pytest.approx(fd, rel=1e-6)


def test_survival_non_increasing_when_flag_clear():
    data = weibull_data(3000, delayed=True, censor=3.0, seed=10)
    m = fit_flexparam(data, FlexParamSpec(df=4))
    assert not m.flags["negative_hazard"]
    lo, hi = m.flags["time_range"]
    s = survival(m, np.linspace(lo, hi, 500))
    assert np.all(np.diff(s) <= 0)


def test_fit_errors():
    data = SurvivalData(np.zeros(3), np.ones(3), np.zeros(3, dtype=int))
    with pytest.raises(ConfigError, match="zero events"):
        fit_flexparam(data, FlexParamSpec(df=1))
    with pytest.raises(ConfigError, match="df"):
        FlexParamSpec(df=0)
    with pytest.raises(SchemaError):
        SurvivalRecord(1, 2.0, 1.0, 1)
    with pytest.raises(ConfigError, match="expected rates"):
        fit_flexparam(SurvivalData(np.zeros(3), np.arange(1.0, 4.0), np.ones(3, dtype=int)), FlexParamSpec(df=1, kind="excess"))


def test_fit_from_records():
    d = weibull_data(500, censor=3.0, seed=11)
    recs = [SurvivalRecord(i, d.entry[i], d.exit[i], int(d.status[i]), {"x": d.covariates["x"][i]}) for i in range(len(d))]
    a = fit_flexparam(recs, FlexParamSpec(df=2, covariates=("x",)))
    b = fit_flexparam(d, FlexParamSpec(df=2, covariates=("x",)))
    np.testing.assert_array_equal(a.parameters, b.parameters)


def test_save_load_byte_identical(tmp_path):
    data = weibull_data(1000, rate=0.2, censor=3.0, seed=12)
    m = fit_flexparam(data, FlexParamSpec(df=3, covariates=("x",), kind="excess", clock="reset"))
    p = tmp_path / "m.json"
    save_model(m, p)
    again = load_model(p)
    assert dumps(again) == p.read_text()
    np.testing.assert_array_equal(again.vcov, m.vcov)
    assert again.spec == m.spec


def test_draw_exponential_exact():
    lam = 0.37
    m = fixed_model((0.0, 1.0), (math.log(lam), 1.0))
    for entry, E in [(0.0, 0.5), (1.3, 2.0), (4.0, 1e-6)]:
        d = draw_event_time(m, {}, entry, E, 100.0)
        assert not d.censored
        assert abs(d.time - (entry + E / lam)) * lam < 1e-9
    d = draw_event_time(m, {}, 0.0, 1e9, 100.0)
    assert d.censored and d.time == 100.0


def test_draw_probability_integral_transform():
    m = fixed_model((-2.0, -0.5, 0.5, 1.5), (-1.0, 1.2, 0.05, -0.03), (0.4,), ("x",))
    rng = np.random.default_rng(13)
    n = 100_000
    entry = rng.uniform(0, 2, n)
    E = rng.exponential(size=n)
    horizon = 8.0
    t, cens = draw_event_times(m, {"x": 1}, entry, E, horizon)
    assert np.all(t[~cens] > entry[~cens]) and np.all(t <= horizon)
    Hh, He = cumhaz(m, horizon, {"x": 1}), cumhaz(m, entry, {"x": 1})
    # uniform on (0, 1) after conditioning each draw on landing before the horizon
    F = (1 - np.exp(-(cumhaz(m, t, {"x": 1}) - He))) / (1 - np.exp(-(Hh - He)))
    ks = stats.kstest(F[~cens], "uniform")
    assert ks.statistic < 1.628 / math.sqrt((~cens).sum())
    # the censored fraction matches the survival to the horizon
    p = np.exp(-(Hh - He)).mean()
    assert abs(cens.mean() - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_sample_parameters():
    m = fixed_model((0.0, 1.0), (math.log(0.2), 1.0))
    rng = np.random.default_rng(14)
    np.testing.assert_array_equal(sample_parameters(m, rng), m.parameters)
    V = np.array([[2.0, 0.8], [0.8, 1.0]])
    m2 = fixed_model((0.0, 1.0), (0.5, 1.0), vcov=V)
    L = mvn_factor(V)
    draws = np.array([sample_parameters(m2, rng, L) for _ in range(100_000)])
    np.testing.assert_allclose(np.cov(draws.T), V, rtol=0.05)
    np.testing.assert_allclose(draws.mean(axis=0), m2.parameters, atol=0.02)
    m3 = fixed_model((0.0, 1.0), (0.0, 0.0), vcov=np.eye(2))
    L3 = mvn_factor(np.eye(2))
    d3 = np.array([sample_parameters(m3, rng, L3) for _ in range(100_000)])
    assert np.all(np.abs(d3.var(axis=0) - 1) < 0.02)


def test_mvn_factor_semidefinite_and_indefinite():
    v = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = mvn_factor(v)
    np.testing.assert_allclose(L @ L.T, v, atol=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        mvn_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_explicit_knots_respected():
    data = weibull_data(1000, censor=3.0, seed=15)
    kv = KnotVector((-3.0, 0.0, 1.0))
    m = fit_flexparam(data, FlexParamSpec(df=2, knots=kv))
    assert m.baseline_knots == kv
