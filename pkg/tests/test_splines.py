import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from excessms.splines import (
    KnotVector,
    SplineSpec,
    orthogonalize_basis,
    orthogonalized,
    place_knots,
    rcs_basis,
    rcs_deriv,
    rcs_deriv2,
)


def truncated_power_oracle(x, knots):
    """Term-by-term restricted cubic spline, written out longhand."""
    K = len(knots)
    out = [x]
    for j in range(1, K - 1):
        lam = (knots[-1] - knots[j]) / (knots[-1] - knots[0])
        term = 0.0
        if x > knots[j]:
            term += (x - knots[j]) ** 3
        if x > knots[0]:
            term -= lam * (x - knots[0]) ** 3
        if x > knots[-1]:
            term -= (1 - lam) * (x - knots[-1]) ** 3
        out.append(term)
    return out


def centile_oracle(values, p):
    """Averaged inverted empirical CDF by explicit sorting and indexing."""
    s = sorted(values)
    n = len(s)
    h = n * p / 100.0
    j = math.floor(h)
    if abs(h - j) < 1e-12 and 0 < j < n:
        return 0.5 * (s[j - 1] + s[j])
    return s[min(max(math.ceil(h), 1), n) - 1]


def test_df1_boundary_only():
    kv = place_knots(np.arange(1, 101), 1)
    assert kv.knots == (1.0, 100.0)


def test_centile_knots_match_sort_oracle():
    rng = np.random.default_rng(3)
    t = rng.weibull(1.3, size=997)
    kv = place_knots(t, 3)
    expected = [min(t), centile_oracle(t, 100 / 3), centile_oracle(t, 200 / 3), max(t)]
    np.testing.assert_allclose(kv.knots, expected, rtol=0, atol=0)


def test_centile_knots_log_scale():
    rng = np.random.default_rng(4)
    t = rng.exponential(size=200)
    kv = place_knots(t, 4, log_scale=True)
    lt = np.log(t)
    expected = [lt.min()] + [centile_oracle(lt, p) for p in (25, 50, 75)] + [lt.max()]
    np.testing.assert_allclose(kv.knots, expected)
    assert kv.scale_is_log


def test_log_age_knots_accepted():
    kv = KnotVector((2.8904, 4.0604, 4.2195, 4.3175, 4.3944, 4.5951), True)
    assert kv.df == 5
    assert math.isclose(math.exp(kv.knots[0]), 18.0, rel_tol=1e-3)


def test_place_knots_errors():
    with pytest.raises(ValueError, match="duplicate"):
        place_knots([1, 1, 1, 2], 3)
    with pytest.raises(ValueError, match="positive"):
        place_knots([0.0, 1.0, 2.0], 1, log_scale=True)
    with pytest.raises(ValueError):
        place_knots([], 1)


def test_two_knot_basis_is_identity():
    spec = SplineSpec(KnotVector((0.0, 1.0)))
    x = np.array([-3.0, 0.2, 7.5])
    np.testing.assert_array_equal(rcs_basis(x, spec)[:, 0], x)
    np.testing.assert_array_equal(rcs_deriv(x, spec)[:, 0], 1.0)


def test_linear_below_lower_boundary():
    spec = SplineSpec(KnotVector((0.0, 1.0, 2.0, 3.0)))
    b = rcs_basis(np.array([-4.0, -5.0, -6.0]), spec)
    assert np.all(b[0] - 2 * b[1] + b[2] == 0.0)


def test_matches_truncated_power_oracle():
    knots = (0.0, 1.0, 2.0, 3.0)
    spec = SplineSpec(KnotVector(knots))
    for x in (1.5, -0.3, 2.7, 4.2):
        np.testing.assert_allclose(rcs_basis(x, spec), truncated_power_oracle(x, knots), rtol=1e-14, atol=1e-14)


def test_derivative_matches_finite_differences():
    spec = SplineSpec(KnotVector((-1.0, 0.1, 0.4, 1.3, 2.0)))
    h = 1e-5
    for x in (0.25, 0.9, 1.7):
        fd = (rcs_basis(x + h, spec) - rcs_basis(x - h, spec)) / (2 * h)
        np.testing.assert_allclose(rcs_deriv(x, spec), fd, rtol=1e-6, atol=1e-9)


def test_derivative_constant_beyond_upper_boundary():
    spec = SplineSpec(KnotVector((0.0, 0.5, 1.0, 2.0)))
    d = rcs_deriv(np.array([2.5, 5.0, 50.0]), spec)
    np.testing.assert_allclose(d[0], d[1], rtol=1e-12)
    np.testing.assert_allclose(d[0], d[2], rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    gaps=st.lists(st.floats(0.05, 3.0), min_size=1, max_size=6),
    start=st.floats(-5, 5),
)
def test_dimension_and_c2_continuity(gaps, start):
    knots = tuple(start + np.concatenate([[0.0], np.cumsum(gaps)]))
    spec = SplineSpec(KnotVector(knots))
    assert rcs_basis(0.0, spec).shape == (len(knots) - 1,)
    eps = 1e-7
    for k in knots:
        for f in (rcs_basis, rcs_deriv, rcs_deriv2):
            lo, hi = f(k - eps, spec), f(k + eps, spec)
            scale = 1.0 + np.abs(lo).max()
            # second derivative changes slope at knots but not value
            assert np.abs(hi - lo).max() <= 1e-4 * scale
    # zero curvature outside the boundary knots
    out = np.array([knots[0] - 1.0, knots[0] - 1e-3, knots[-1] + 1e-3, knots[-1] + 2.0])
    assert np.abs(rcs_deriv2(out, spec)).max() < 1e-9


def test_orthogonalize_identity_unchanged():
    q, r = orthogonalize_basis(np.eye(4))
    np.testing.assert_array_equal(q, np.eye(4))
    np.testing.assert_array_equal(r, np.eye(4))


def test_orthogonalize_random_design():
    a = np.random.default_rng(0).normal(size=(100, 4))
    q, r = orthogonalize_basis(a)
    np.testing.assert_allclose(q.T @ q, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(q @ r, a, atol=1e-12)


def test_orthogonalize_rank_deficient():
    a = np.ones((10, 2))
    with pytest.raises(np.linalg.LinAlgError):
        orthogonalize_basis(a)


def test_orthogonalized_spec_spans_same_space():
    rng = np.random.default_rng(1)
    x = np.sort(rng.normal(size=300))
    kv = place_knots(x, 4)
    plain = rcs_basis(x, SplineSpec(kv))
    ortho_spec = orthogonalized(kv, x)
    ortho = rcs_basis(x, ortho_spec)
    np.testing.assert_allclose(ortho.T @ ortho, np.eye(4), atol=1e-10)
    np.testing.assert_allclose(ortho @ ortho_spec.transform, plain, atol=1e-9)
    # derivative transforms consistently
    np.testing.assert_allclose(rcs_deriv(x, ortho_spec) @ ortho_spec.transform, rcs_deriv(x, SplineSpec(kv)), atol=1e-9)


def test_spec_roundtrip():
    kv = KnotVector((0.0, 1.0, 3.0), True)
    spec = orthogonalized(kv, np.linspace(-1, 4, 50))
    again = SplineSpec.from_dict(spec.to_dict())
    np.testing.assert_array_equal(again.transform, spec.transform)
    assert again.knot_vector == kv
