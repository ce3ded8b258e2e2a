"""Expected (population) event rates modelled on attained age and calendar year.

Population tables give event counts ``d`` and person-years ``y`` per
(year, sex, age) cell. The log rate is a spline in (log) age plus a
spline in calendar year plus covariate effects, fitted by Poisson maximum
likelihood with ``log(y)`` as offset. For a patient diagnosed at age
``a0`` in decimal year ``c0`` the rate ``t`` years later is evaluated at
attained age ``a0 + t`` and year ``c0 + t``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, ConvergenceError, SchemaError
from .splines import KnotVector, SplineSpec, orthogonalized, place_knots, rcs_basis

__all__ = [
    "RateTable",
    "Covariate",
    "ExpectedRateModel",
    "ExpectedCurve",
    "load_rate_table",
    "fit_expected",
    "expected_hazard",
    "expected_cumhaz",
    "expected_extrapolates",
    "attach_expected",
    "save_expected",
    "load_expected",
]

SCHEMA = "excessms.expected/1"
RATE_COLUMNS = ("year", "sex", "age", "d", "y")


@dataclass(frozen=True)
class RateTable:
    year: np.ndarray
    sex: np.ndarray
    age: np.ndarray
    d: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = len(self.year)
        if n == 0:
            raise SchemaError("no data rows")
        for name in RATE_COLUMNS:
            if len(getattr(self, name)) != n:
                raise SchemaError("rate table columns have unequal lengths")
        if np.any(self.y <= 0):
            i = int(np.flatnonzero(self.y <= 0)[0])
            raise SchemaError(f"non-positive person-time in row {i + 1}")
        if np.any(self.d < 0):
            raise SchemaError("negative event count")
        keys = np.stack([self.year, self.sex, self.age], axis=1)
        _, counts = np.unique(keys, axis=0, return_counts=True)
        if np.any(counts > 1):
            dup = keys[_dup_index(keys)]
            raise SchemaError(f"duplicate stratum (year, sex, age) = {tuple(int(v) for v in dup)}")

    def __len__(self):
        return len(self.year)

    @property
    def rate(self) -> np.ndarray:
        return self.d / self.y

    def column(self, name: str) -> np.ndarray:
        if name not in RATE_COLUMNS:
            raise KeyError(name)
        return getattr(self, name)

    def permuted(self, order) -> "RateTable":
        return RateTable(*(getattr(self, c)[order] for c in RATE_COLUMNS))

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATE_COLUMNS)
        for row in zip(self.year, self.sex, self.age, self.d, self.y):
            w.writerow([int(row[0]), int(row[1]), int(row[2]), _num(row[3]), repr(float(row[4]))])


def _num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _dup_index(keys: np.ndarray) -> int:
    seen = set()
    for i, k in enumerate(map(tuple, keys)):
        if k in seen:
            return i
        seen.add(k)
    return 0


def load_rate_table(source: TextIO | str) -> RateTable:
    """Read a comma- or whitespace-delimited table with header ``year sex age d y``."""
    text = source.read() if hasattr(source, "read") else str(source)
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise SchemaError("empty rate table: missing header")
    if "," in lines[0]:
        rows = list(csv.reader(io.StringIO("\n".join(lines))))
    else:
        rows = [ln.split() for ln in lines]
    header = [h.strip().lower() for h in rows[0]]
    missing = [c for c in RATE_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"rate table missing column(s): {', '.join(missing)}")
    idx = {c: header.index(c) for c in RATE_COLUMNS}
    body = rows[1:]
    if not body:
        raise SchemaError("no data rows")
    cols: dict[str, list[float]] = {c: [] for c in RATE_COLUMNS}
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise SchemaError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        for c in RATE_COLUMNS:
            cell = row[idx[c]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise SchemaError(f"line {lineno}: non-numeric {c!r} value {cell!r}") from None
            if not math.isfinite(v):
                raise SchemaError(f"line {lineno}: non-finite {c!r} value")
            cols[c].append(v)
    for c in ("year", "sex", "age"):
        if any(not float(v).is_integer() for v in cols[c]):
            raise SchemaError(f"column {c!r} must hold integers")
    return RateTable(
        year=np.asarray(cols["year"], dtype=np.int64),
        sex=np.asarray(cols["sex"], dtype=np.int64),
        age=np.asarray(cols["age"], dtype=np.int64),
        d=np.asarray(cols["d"], dtype=float),
        y=np.asarray(cols["y"], dtype=float),
    )


@dataclass(frozen=True)
class Covariate:
    """A covariate column of the expected model.

    ``level`` set means an indicator ``source == level``; otherwise the
    source column enters numerically.
    """

    name: str
    source: str
    level: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Covariate":
        """``"sex"`` or ``"female=sex:2"``."""
        text = text.strip()
        if "=" not in text:
            return cls(text, text)
        name, rhs = (s.strip() for s in text.split("=", 1))
        if ":" in rhs:
            src, lvl = rhs.split(":", 1)
            return cls(name, src.strip(), int(lvl))
        return cls(name, rhs)

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (v == self.level).astype(float) if self.level is not None else v

    def value_from(self, pattern: Mapping[str, float]) -> float:
        if self.name in pattern:
            return float(pattern[self.name])
        if self.source in pattern:
            return float(self.encode(pattern[self.source]))
        raise ConfigError(f"covariate pattern lacks {self.name!r} required by the expected-rate model")

    def to_text(self) -> str:
        if self.level is not None:
            return f"{self.name}={self.source}:{self.level}"
        return self.name if self.name == self.source else f"{self.name}={self.source}"


@dataclass(frozen=True)
class ExpectedRateModel:
    """Fitted Poisson model for the log expected rate.

    ``beta`` is ordered (intercept, age spline, year spline, covariates).
    ``vcov`` is kept for inspection only; downstream code treats the
    expected rate as known.
    """

    age_spec: SplineSpec
    year_spec: SplineSpec
    covariates: tuple[Covariate, ...]
    beta: np.ndarray
    vcov: np.ndarray
    loglik: float
    deviance: float
    age_range: tuple[float, float]
    year_range: tuple[float, float]
    iterations: int = 0
    resample = False

    def __post_init__(self):
        p = 1 + self.age_spec.df + self.year_spec.df + len(self.covariates)
        if len(self.beta) != p:
            raise ValueError(f"expected {p} coefficients, got {len(self.beta)}")

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.covariates]

    @property
    def parameters(self) -> np.ndarray:
        return self.beta

    def covariate_vector(self, x1) -> np.ndarray:
        if x1 is None:
            x1 = {}
        if isinstance(x1, Mapping):
            return np.array([c.value_from(x1) for c in self.covariates], dtype=float)
        v = np.atleast_1d(np.asarray(x1, dtype=float))
        if v.shape[-1] != len(self.covariates):
            raise ValueError("covariate vector has the wrong length")
        return v

    def log_rate(self, age, year, x1=None) -> np.ndarray:
        """Log rate at attained age and calendar year (arrays broadcast)."""
        age, year = np.broadcast_arrays(np.asarray(age, float), np.asarray(year, float))
        na, ny = self.age_spec.df, self.year_spec.df
        b = self.beta
        eta = b[0] + rcs_basis(self.age_spec.knot_vector.transform(age), self.age_spec) @ b[1 : 1 + na]
        eta = eta + rcs_basis(self.year_spec.knot_vector.transform(year), self.year_spec) @ b[1 + na : 1 + na + ny]
        xv = self.covariate_vector(x1)
        if xv.ndim == 1:
            eta = eta + float(xv @ b[1 + na + ny :]) if len(xv) else eta
        else:
            eta = eta + xv @ b[1 + na + ny :]
        return eta

    def curve(self, at: Mapping[str, float], horizon: float, params=None) -> "ExpectedCurve":
        """Cumulative expected hazard along time since diagnosis for one pattern."""
        return ExpectedCurve(self, float(at["a0"]), float(at["c0"]), self.covariate_vector(at), horizon)


def _design(table: RateTable, age_spec: SplineSpec, year_spec: SplineSpec, covariates) -> np.ndarray:
    cols = [np.ones(len(table))]
    a = rcs_basis(age_spec.knot_vector.transform(table.age), age_spec)
    c = rcs_basis(year_spec.knot_vector.transform(table.year), year_spec)
    cols.extend(a.T)
    cols.extend(c.T)
    for cov in covariates:
        cols.append(cov.encode(table.column(cov.source)))
    return np.column_stack(cols)


def _spec(spec, values) -> SplineSpec:
    if isinstance(spec, KnotVector):
        spec = SplineSpec(spec)
    if spec.orthogonalize and spec.transform is None:
        spec = orthogonalized(spec.knot_vector, spec.knot_vector.transform(values))
    return spec


def default_specs(table: RateTable, df_age: int, df_year: int, log_age: bool = True) -> tuple[SplineSpec, SplineSpec]:
    """Knots at centiles of the table's ages and years."""
    return (
        SplineSpec(place_knots(table.age, df_age, log_scale=log_age)),
        SplineSpec(place_knots(table.year, df_year)),
    )


def fit_expected(
    table: RateTable,
    age_spec: SplineSpec | KnotVector,
    year_spec: SplineSpec | KnotVector,
    covariates: Sequence[str | Covariate] = (),
    max_iter: int = 100,
) -> ExpectedRateModel:
    """Poisson maximum likelihood for ``log(d/y) = f(age) + g(year) + x b``.

    Newton-Raphson with step halving; columns are rescaled internally so
    that calendar-year splines do not wreck the conditioning.
    """
    covs = tuple(c if isinstance(c, Covariate) else Covariate.parse(c) for c in covariates)
    for c in covs:
        if c.source not in RATE_COLUMNS:
            raise ConfigError(f"covariate source {c.source!r} is not a rate table column")
    age_spec = _spec(age_spec, table.age)
    year_spec = _spec(year_spec, table.year)

    X = _design(table, age_spec, year_spec, covs)
    scale = np.sqrt((X**2).mean(axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    if np.linalg.matrix_rank(Xs) < Xs.shape[1]:
        raise ConfigError("expected-rate design is rank deficient (separation or collinear terms)")
    d, offset = table.d, np.log(table.y)
    const = -gammaln(d + 1).sum()

    def loglik(b):
        eta = Xs @ b + offset
        if eta.max() > 700:
            return -np.inf, None
        mu = np.exp(eta)
        return float(d @ eta - mu.sum() + const), mu

    b = np.zeros(X.shape[1])
    b[0] = math.log(max(d.sum(), 0.5) / table.y.sum()) / Xs[0, 0]
    ll, mu = loglik(b)
    for it in range(1, max_iter + 1):
        grad = Xs.T @ (d - mu)
        info = (Xs * mu[:, None]).T @ Xs
        step = np.linalg.solve(info, grad)
        t = 1.0
        for _ in range(60):
            ll_new, mu_new = loglik(b + t * step)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise ConvergenceError("expected-rate fit: step halving failed")
        b, ll_old, ll, mu = b + t * step, ll, ll_new, mu_new
        grad = Xs.T @ (d - mu)
        rel = abs(ll - ll_old) / (abs(ll) + 1e-300)
        if rel < 1e-10 and np.abs(grad).max() / max(1.0, d.sum()) < 1e-6:
            break
    else:
        raise ConvergenceError(f"expected-rate fit did not converge in {max_iter} iterations")

    info = (Xs * mu[:, None]).T @ Xs
    vcov = np.linalg.inv(info) / np.outer(scale, scale)
    vcov = 0.5 * (vcov + vcov.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev_terms = np.where(d > 0, d * np.log(d / mu), 0.0) - (d - mu)
    return ExpectedRateModel(
        age_spec=age_spec,
        year_spec=year_spec,
        covariates=covs,
        beta=b / scale,
        vcov=vcov,
        loglik=ll,
        deviance=float(2 * dev_terms.sum()),
        age_range=(float(table.age.min()), float(table.age.max())),
        year_range=(float(table.year.min()), float(table.year.max())),
        iterations=it,
    )


def expected_hazard(model: ExpectedRateModel, t, a0, c0, x1=None) -> np.ndarray | float:
    """Expected rate per person-year ``t`` years after diagnosis."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    out = np.exp(model.log_rate(np.asarray(a0) + t, np.asarray(c0) + t, x1))
    return float(out) if out.ndim == 0 else out


def expected_extrapolates(model: ExpectedRateModel, t, a0, c0) -> np.ndarray | bool:
    """True where attained age or year falls outside the fitted table."""
    age = np.asarray(a0, float) + np.asarray(t, float)
    year = np.asarray(c0, float) + np.asarray(t, float)
    out = (age < model.age_range[0]) | (age > model.age_range[1])
    out |= (year < model.year_range[0]) | (year > model.year_range[1])
    return bool(out) if np.ndim(out) == 0 else out


def _breakpoints(model: ExpectedRateModel, t0: float, t1: float, a0: float, c0: float) -> np.ndarray:
    """Integer years on the diagnosis clock plus every knot crossing."""
    pts = [t0, t1]
    pts.extend(range(math.floor(t0) + 1, math.ceil(t1)))
    ak = model.age_spec.knot_vector
    for k in ak.knots:
        pts.append((math.exp(k) if ak.scale_is_log else k) - a0)
    pts.extend(k - c0 for k in model.year_spec.knot_vector.knots)
    bp = np.unique(np.asarray(pts, dtype=float))
    return bp[(bp >= t0) & (bp <= t1)]


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def expected_cumhaz(model: ExpectedRateModel, t0: float, t1: float, a0: float, c0: float, x1=None, nodes: int = 30) -> float:
    """Integral of the expected rate over ``[t0, t1]`` on the diagnosis clock.

    Fixed-order Gauss-Legendre on yearly subintervals, further split at
    the points where attained age or calendar year crosses a knot so that
    each piece has an analytic integrand.
    """
    if not 0 <= t0 <= t1:
        raise ValueError("need 0 <= t0 <= t1")
    if t0 == t1:
        return 0.0
    bp = _breakpoints(model, t0, t1, a0, c0)
    x, w = _gauss_legendre(nodes)
    lo, hi = bp[:-1, None], bp[1:, None]
    half = 0.5 * (hi - lo)
    tt = lo + half * (x + 1.0)
    h = np.exp(model.log_rate(a0 + tt, c0 + tt, x1))
    return math.fsum((half * w * h).ravel())


class ExpectedCurve:
    """Tabulated cumulative expected hazard for one covariate pattern.

    Cells of at most 1/32 year (further split at knot crossings) are
    integrated once with the 30-point rule. Inside a cell the log rate is
    analytic, so a cubic Hermite interpolant through the exact cumulative
    and exact rate at the cell ends has error of order
    ``cell**4 / 384`` times the rate's third derivative, far below the
    inversion tolerance.
    """

    cell = 1.0 / 32.0

    def __init__(self, model: ExpectedRateModel, a0: float, c0: float, x1: np.ndarray, horizon: float):
        self.model, self.a0, self.c0, self.x1 = model, a0, c0, x1
        self.horizon = float(horizon)
        top = self.horizon + self.cell
        bp = _breakpoints(model, 0.0, top, a0, c0)
        fine = np.arange(0.0, top + self.cell, self.cell)
        bp = np.unique(np.concatenate([bp, fine[fine <= top]]))
        x, w = _gauss_legendre(30)
        lo, hi = bp[:-1, None], bp[1:, None]
        half = 0.5 * (hi - lo)
        tt = lo + half * (x + 1.0)
        pieces = (half * w * self._rate(tt)).sum(axis=1)
        self._bp = bp
        self._cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self._h = self._rate(bp)

    def _rate(self, t):
        return np.exp(self.model.log_rate(self.a0 + t, self.c0 + t, self.x1))

    def hazard(self, t):
        return self._rate(np.asarray(t, dtype=float))

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t > self._bp[-1]) or np.any(t < 0):
            raise ValueError("time outside tabulated range")
        i = np.clip(np.searchsorted(self._bp, t, side="right") - 1, 0, len(self._bp) - 2)
        d = self._bp[i + 1] - self._bp[i]
        return i, d, (t - self._bp[i]) / d

    def both(self, t):
        """Cumulative hazard and its slope from the Hermite interpolant."""
        i, d, s = self._locate(t)
        H0, H1 = self._cum[i], self._cum[i + 1]
        m0, m1 = self._h[i] * d, self._h[i + 1] * d
        s2 = s * s
        s3 = s2 * s
        H = H0 + (H1 - H0) * (3 * s2 - 2 * s3) + m0 * (s - 2 * s2 + s3) + m1 * (s3 - s2)
        dH = ((H1 - H0) * (6 * s - 6 * s2) + m0 * (1 - 4 * s + 3 * s2) + m1 * (3 * s2 - 2 * s)) / d
        return H, dH

    def cumhaz(self, t):
        return self.both(t)[0]

    def is_monotone(self) -> bool:
        return True

    def extrapolated(self) -> bool:
        grid = np.linspace(0.0, self.horizon, 64)
        return bool(np.any(expected_extrapolates(self.model, grid, self.a0, self.c0)))


def attach_expected(
    dataset,
    model: ExpectedRateModel,
    mapping: Mapping[str, str] | None = None,
    transitions: Iterable[int] | None = None,
    column: str = "expected_rate",
):
    """Add the expected rate at each row's exit time.

    ``mapping`` sends model covariate names (and ``a0``/``c0``) to dataset
    columns; unmapped names are looked up under their own name. Rows of
    transitions not listed get NaN.
    """
    mapping = dict(mapping or {})
    cols = dataset.covariates

    def col(name):
        src = mapping.get(name, name)
        if src not in cols:
            raise ConfigError(f"no dataset column for expected-model term {name!r} (looked for {src!r})")
        return np.asarray(cols[src], dtype=float)

    a0, c0 = col("a0"), col("c0")
    x = []
    for cov in model.covariates:
        src = mapping.get(cov.name, cov.name)
        if src in cols:
            x.append(np.asarray(cols[src], dtype=float))
        elif mapping.get(cov.source, cov.source) in cols:
            x.append(cov.encode(cols[mapping.get(cov.source, cov.source)]))
        else:
            raise ConfigError(f"missing covariate mapping for expected-model term {cov.name!r}")
    X1 = np.column_stack(x) if x else np.zeros((len(dataset), 0))
    rates = np.exp(model.log_rate(a0 + dataset.stop, c0 + dataset.stop, X1))
    if transitions is not None:
        keep = np.isin(dataset.trans, list(transitions))
        rates = np.where(keep, rates, np.nan)
    return dataset.with_column(column, rates)


def to_dict(model: ExpectedRateModel) -> dict:
    return {
        "schema": SCHEMA,
        "age_spec": model.age_spec.to_dict(),
        "year_spec": model.year_spec.to_dict(),
        "covariates": [c.to_text() for c in model.covariates],
        "beta": model.beta.tolist(),
        "vcov": model.vcov.tolist(),
        "loglik": model.loglik,
        "deviance": model.deviance,
        "age_range": list(model.age_range),
        "year_range": list(model.year_range),
        "iterations": model.iterations,
    }


def from_dict(d: dict) -> ExpectedRateModel:
    if d.get("schema") != SCHEMA:
        raise SchemaError(f"not an expected-rate model file (schema {d.get('schema')!r})")
    return ExpectedRateModel(
        age_spec=SplineSpec.from_dict(d["age_spec"]),
        year_spec=SplineSpec.from_dict(d["year_spec"]),
        covariates=tuple(Covariate.parse(c) for c in d["covariates"]),
        beta=np.asarray(d["beta"], dtype=float),
        vcov=np.asarray(d["vcov"], dtype=float),
        loglik=float(d["loglik"]),
        deviance=float(d["deviance"]),
        age_range=tuple(d["age_range"]),
        year_range=tuple(d["year_range"]),
        iterations=int(d.get("iterations", 0)),
    )


def save_expected(model: ExpectedRateModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(model), fh, indent=2)
        fh.write("\n")


def load_expected(path) -> ExpectedRateModel:
    with open(path) as fh:
        return from_dict(json.load(fh))
