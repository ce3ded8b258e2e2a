"""Flexible parametric survival models on the log cumulative hazard scale.

For clock time ``tau`` and covariates ``x``

    eta(tau | x) = gamma_0 + s(log tau; gamma) + x beta,    H = exp(eta),
    h = s'(log tau) H / tau,

with ``s`` a restricted cubic spline. An ``excess`` model describes the
excess hazard ``lambda`` on top of a known expected rate ``r``; its
event contribution is ``log(r + lambda)`` while the cumulative expected
hazard drops out of the likelihood as a parameter-free constant.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, SchemaError
from .invert import solve_increasing
from .splines import KnotVector, SplineSpec, orthogonalized, place_knots, rcs_basis, rcs_deriv

__all__ = [
    "SplineTerm",
    "FlexParamSpec",
    "CovariateDesign",
    "SurvivalRecord",
    "SurvivalData",
    "FittedTransitionModel",
    "fit_flexparam",
    "fixed_model",
    "loglik_gradient",
    "cumhaz",
    "hazard",
    "survival",
    "draw_event_time",
    "draw_event_times",
    "sample_parameters",
    "save_model",
    "load_model",
]

SCHEMA = "excessms.flexparam/1"
HAZARD_FLOOR = 1e-12


@dataclass(frozen=True)
class SplineTerm:
    """Covariate entered as a restricted cubic spline.

    Knots are either given or placed at centiles of the fitting data.
    """

    name: str
    df: int = 3
    log: bool = False
    knots: KnotVector | None = None

    @classmethod
    def parse(cls, text: str) -> "SplineTerm":
        """``"a0:3"``, ``"a0:5:log"``."""
        parts = text.split(":")
        name = parts[0].strip()
        df = int(parts[1]) if len(parts) > 1 and parts[1] else 3
        return cls(name, df, len(parts) > 2 and parts[2].strip() == "log")


@dataclass(frozen=True)
class FlexParamSpec:
    df: int = 3
    knots: KnotVector | None = None
    covariates: tuple[str, ...] = ()
    splines: tuple[SplineTerm, ...] = ()
    kind: str = "all_cause"
    clock: str = "forward"
    orthogonalize: bool = False

    def __post_init__(self):
        if self.knots is None and self.df < 1:
            raise ConfigError("df must be at least 1")
        if self.kind not in ("all_cause", "excess"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.clock not in ("forward", "reset"):
            raise ConfigError(f"unknown clock {self.clock!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "splines", tuple(self.splines))

    def to_dict(self) -> dict:
        return {
            "df": self.df,
            "knots": None if self.knots is None else self.knots.to_dict(),
            "covariates": list(self.covariates),
            "splines": [
                {"name": s.name, "df": s.df, "log": s.log, "knots": None if s.knots is None else s.knots.to_dict()}
                for s in self.splines
            ],
            "kind": self.kind,
            "clock": self.clock,
            "orthogonalize": self.orthogonalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlexParamSpec":
        return cls(
            df=int(d["df"]),
            knots=None if d.get("knots") is None else KnotVector.from_dict(d["knots"]),
            covariates=tuple(d.get("covariates", ())),
            splines=tuple(
                SplineTerm(s["name"], int(s["df"]), bool(s["log"]), None if s.get("knots") is None else KnotVector.from_dict(s["knots"]))
                for s in d.get("splines", ())
            ),
            kind=d.get("kind", "all_cause"),
            clock=d.get("clock", "forward"),
            orthogonalize=bool(d.get("orthogonalize", False)),
        )


@dataclass(frozen=True)
class CovariateDesign:
    """Maps raw covariates to the columns multiplying ``beta``."""

    linear: tuple[str, ...] = ()
    splines: tuple[tuple[str, SplineSpec], ...] = ()

    @property
    def columns(self) -> list[str]:
        cols = list(self.linear)
        for name, spec in self.splines:
            cols.extend(f"rcs_{name}_{j + 1}" for j in range(spec.df))
        return cols

    @property
    def width(self) -> int:
        return len(self.linear) + sum(s.df for _, s in self.splines)

    @property
    def required(self) -> list[str]:
        return list(self.linear) + [n for n, _ in self.splines]

    def matrix(self, covs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        parts = [np.zeros((n, 0))]
        for name in self.linear:
            parts.append(np.asarray(_lookup(covs, name), dtype=float).reshape(n, 1))
        for name, spec in self.splines:
            v = np.asarray(_lookup(covs, name), dtype=float).reshape(n)
            parts.append(rcs_basis(spec.knot_vector.transform(v), spec))
        return np.hstack(parts)

    def vector(self, pattern: Mapping[str, float]) -> np.ndarray:
        missing = [k for k in self.required if k not in pattern]
        if missing:
            raise ConfigError(f"covariate pattern lacks {', '.join(missing)}")
        return self.matrix({k: np.atleast_1d(float(pattern[k])) for k in self.required}, 1)[0]

    def to_dict(self) -> dict:
        return {"linear": list(self.linear), "splines": [[n, s.to_dict()] for n, s in self.splines]}

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateDesign":
        return cls(tuple(d["linear"]), tuple((n, SplineSpec.from_dict(s)) for n, s in d["splines"]))


def _lookup(covs, name):
    if name not in covs:
        raise ConfigError(f"covariate {name!r} is required by the model but not supplied")
    return covs[name]


@dataclass(frozen=True)
class SurvivalRecord:
    id: object
    entry: float
    exit: float
    status: int
    covariates: Mapping[str, float] = field(default_factory=dict)
    expected_rate_at_exit: float | None = None

    def __post_init__(self):
        if not (self.exit > self.entry >= 0):
            raise SchemaError(f"record {self.id}: need exit > entry >= 0")
        if self.status not in (0, 1):
            raise SchemaError(f"record {self.id}: status must be 0 or 1")
        if self.expected_rate_at_exit is not None and not self.expected_rate_at_exit >= 0:
            raise SchemaError(f"record {self.id}: expected rate must be non-negative")


@dataclass(frozen=True)
class SurvivalData:
    """Column-oriented survival records on one transition clock."""

    entry: np.ndarray
    exit: np.ndarray
    status: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    expected_rate: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(self.exit > self.entry) or np.any(self.entry < 0):
            raise SchemaError("need exit > entry >= 0 on every row")
        if not np.all(np.isin(self.status, (0, 1))):
            raise SchemaError("status must be 0 or 1")

    def __len__(self):
        return len(self.exit)

    @classmethod
    def from_records(cls, records: Sequence[SurvivalRecord]) -> "SurvivalData":
        names = sorted({k for r in records for k in r.covariates})
        rates = [r.expected_rate_at_exit for r in records]
        return cls(
            np.array([r.entry for r in records], dtype=float),
            np.array([r.exit for r in records], dtype=float),
            np.array([r.status for r in records], dtype=np.int64),
            {k: np.array([r.covariates.get(k, np.nan) for r in records], dtype=float) for k in names},
            None if all(v is None for v in rates) else np.array([np.nan if v is None else v for v in rates], dtype=float),
        )

    @classmethod
    def from_dataset(cls, data, clock: str = "forward", rate_column: str | None = None) -> "SurvivalData":
        """From a :class:`~excessms.msm.MultiStateDataset` (already filtered to one transition)."""
        entry, exit_ = data.clock_times(clock)
        covs = {k: np.asarray(v, dtype=float) for k, v in data.covariates.items()}
        rate = None
        if rate_column is not None:
            if rate_column not in covs:
                raise ConfigError(f"dataset has no {rate_column!r} column; attach expected rates first")
            rate = covs[rate_column]
        return cls(entry, exit_, np.asarray(data.status), covs, rate)


class _Design(NamedTuple):
    X1: np.ndarray
    Xd1: np.ndarray
    logt1: np.ndarray
    X0: np.ndarray  # rows with entry > 0
    ev: np.ndarray  # event mask
    rate: np.ndarray  # expected rate on event rows (zeros for all-cause)


def _build_design(data: SurvivalData, baseline: SplineSpec, cov: CovariateDesign, kind: str) -> _Design:
    n = len(data)
    Z = cov.matrix(data.covariates, n)
    u1 = np.log(data.exit)
    X1 = np.hstack([np.ones((n, 1)), rcs_basis(u1, baseline), Z])
    Xd1 = np.hstack([np.zeros((n, 1)), rcs_deriv(u1, baseline), np.zeros_like(Z)])
    late = data.entry > 0
    u0 = np.log(data.entry[late])
    X0 = np.hstack([np.ones((late.sum(), 1)), rcs_basis(u0, baseline), Z[late]])
    ev = data.status == 1
    if kind == "excess":
        if data.expected_rate is None:
            raise ConfigError("excess model needs expected rates at exit")
        rate = data.expected_rate[ev]
        if np.any(~np.isfinite(rate)) or np.any(rate < 0):
            raise SchemaError("every event row of an excess model needs a non-negative expected rate")
    else:
        rate = np.zeros(ev.sum())
    return _Design(X1, Xd1, u1, X0, ev, rate)


def _loglik(theta: np.ndarray, D: _Design, order: int = 2):
    """Log-likelihood with gradient and Hessian (``order`` 0, 1 or 2)."""
    eta1 = D.X1 @ theta
    eta0 = D.X0 @ theta
    if eta1.max(initial=-np.inf) > 700 or eta0.max(initial=-np.inf) > 700:
        return -np.inf, None, None
    H1 = np.exp(eta1)
    H0 = np.exp(eta0)
    Xe, Xde = D.X1[D.ev], D.Xd1[D.ev]
    s = Xde @ theta
    He = H1[D.ev]
    te = np.exp(D.logt1[D.ev])
    lam = s * He / te
    tot = D.rate + lam
    if np.any(tot <= 0):
        return -np.inf, None, None
    ll = float(np.log(tot).sum() - H1.sum() + H0.sum())
    if order == 0:
        return ll, None, None
    c = He / te  # d lambda = c * (Xd + s X)
    dlam = c[:, None] * (Xde + s[:, None] * Xe)
    g = (dlam / tot[:, None]).sum(axis=0) - H1 @ D.X1 + H0 @ D.X0
    if order == 1:
        return ll, g, None
    w = c / tot
    A = (Xde * w[:, None]).T @ Xe
    hess = A + A.T + (Xe * (w * s)[:, None]).T @ Xe
    hess -= (dlam / tot[:, None]).T @ (dlam / tot[:, None])
    hess -= (D.X1 * H1[:, None]).T @ D.X1
    hess += (D.X0 * H0[:, None]).T @ D.X0
    return ll, g, hess


def _standardize(D: _Design, first: int) -> tuple[_Design, np.ndarray]:
    """Centre and scale covariate columns ``first..``; returns ``(D', M)`` with ``theta = M phi``.

    Raw calendar-year splines span many orders of magnitude, which stalls
    Newton steps. The likelihood is unchanged by the reparametrisation.
    """
    p = D.X1.shape[1]
    M = np.eye(p)
    for j in range(first, p):
        col = D.X1[:, j]
        m = col.mean()
        sd = col.std()
        sd = sd if sd > 0 else max(abs(m), 1.0)
        M[j, j] = 1.0 / sd
        M[0, j] = -m / sd
    return D._replace(X1=D.X1 @ M, Xd1=D.Xd1 @ M, X0=D.X0 @ M), M


def _nelson_aalen_start(data: SurvivalData, baseline: SplineSpec, p: int) -> np.ndarray | None:
    ev = data.status == 1
    times = np.unique(data.exit[ev])
    if times.size < 2:
        return None
    d = np.searchsorted(np.sort(data.exit[ev]), times, side="right") - np.searchsorted(np.sort(data.exit[ev]), times, side="left")
    ent = np.sort(data.entry)
    ext = np.sort(data.exit)
    at_risk = np.searchsorted(ent, times, side="left") - np.searchsorted(ext, times, side="left")
    H = np.cumsum(d / np.maximum(at_risk, 1))
    u = np.log(times)
    A = np.hstack([np.ones((times.size, 1)), rcs_basis(u, baseline)])
    coef, *_ = np.linalg.lstsq(A, np.log(H), rcond=None)
    grid = np.linspace(u.min(), u.max(), 50)
    if np.any(rcs_deriv(grid, baseline) @ coef[1:] <= 0.05):
        return None
    theta = np.zeros(p)
    theta[: coef.size] = coef
    return theta


def _weibull_start(data: SurvivalData, baseline: SplineSpec, p: int) -> np.ndarray:
    rate = max(data.status.sum(), 1) / (data.exit - data.entry).sum()
    raw = np.zeros(baseline.df)
    raw[0] = 1.0
    coef = raw if baseline.transform is None else baseline.transform @ raw
    theta = np.zeros(p)
    theta[0] = math.log(rate)
    theta[1 : 1 + baseline.df] = coef
    return theta


@dataclass(frozen=True)
class FittedTransitionModel:
    spec: FlexParamSpec
    baseline: SplineSpec
    design: CovariateDesign
    gamma: np.ndarray
    beta: np.ndarray
    vcov: np.ndarray
    loglik: float
    converged: bool = True
    iterations: int = 0
    flags: Mapping[str, object] = field(default_factory=dict)
    resample = True

    def __post_init__(self):
        p = len(self.gamma) + len(self.beta)
        if self.vcov.shape != (p, p):
            raise ValueError("vcov dimension does not match parameters")

    @property
    def baseline_knots(self) -> KnotVector:
        return self.baseline.knot_vector

    @property
    def parameters(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.beta])

    @property
    def parameter_names(self) -> list[str]:
        return ["_cons"] + [f"_rcs{j + 1}" for j in range(self.baseline.df)] + self.design.columns

    def _split(self, theta):
        theta = self.parameters if theta is None else np.asarray(theta, dtype=float)
        ng = len(self.gamma)
        return theta[:ng], theta[ng:]

    def offset(self, x, theta=None) -> float:
        _, beta = self._split(theta)
        if not len(beta):
            return 0.0
        return float(self.design.vector(x or {}) @ beta)

    def log_cumhaz(self, tau, x=None, theta=None):
        gamma, _ = self._split(theta)
        tau = np.asarray(tau, dtype=float)
        with np.errstate(divide="ignore"):
            u = np.log(tau)
        safe = np.where(tau > 0, u, 0.0)
        eta = gamma[0] + rcs_basis(safe, self.baseline) @ gamma[1:] + self.offset(x, theta)
        return np.where(tau > 0, eta, -np.inf)

    def curve(self, at: Mapping[str, float], horizon: float, params=None) -> "FlexCurve":
        gamma, _ = self._split(params)
        return FlexCurve(self.baseline, gamma, self.offset(at, params), horizon)


def fixed_model(
    knots: Sequence[float],
    gamma: Sequence[float],
    beta: Sequence[float] = (),
    covariates: Sequence[str] = (),
    kind: str = "all_cause",
    clock: str = "forward",
    vcov: np.ndarray | None = None,
) -> FittedTransitionModel:
    """Model with given coefficients; ``knots`` are on the log-time scale.

    ``vcov`` defaults to zeros, so bootstrap draws return the coefficients.
    """
    kv = KnotVector(tuple(float(k) for k in knots))
    gamma = np.asarray(gamma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if len(gamma) != kv.df + 1 or len(beta) != len(covariates):
        raise ConfigError("coefficient lengths do not match knots and covariates")
    p = len(gamma) + len(beta)
    spec = FlexParamSpec(df=kv.df, knots=kv, covariates=tuple(covariates), kind=kind, clock=clock)
    return FittedTransitionModel(
        spec=spec,
        baseline=SplineSpec(kv),
        design=CovariateDesign(tuple(covariates), ()),
        gamma=gamma,
        beta=beta,
        vcov=np.zeros((p, p)) if vcov is None else np.asarray(vcov, dtype=float),
        loglik=float("nan"),
    )


class FlexCurve:
    """``H(tau) = exp(gamma_0 + s(log tau) + offset)`` for one covariate pattern."""

    def __init__(self, baseline: SplineSpec, gamma: np.ndarray, offset: float, horizon: float):
        self.baseline, self.gamma, self.offset = baseline, np.asarray(gamma, float), float(offset)
        self.horizon = float(horizon)

    def _eta(self, u):
        return self.gamma[0] + rcs_basis(u, self.baseline) @ self.gamma[1:] + self.offset

    def _slope(self, u):
        return rcs_deriv(u, self.baseline) @ self.gamma[1:]

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        pos = t > 0
        u = np.log(np.where(pos, t, 1.0))
        with np.errstate(over="ignore", under="ignore"):
            return np.where(pos, np.exp(self._eta(u)), 0.0)

    def hazard(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 1e-12)
        u = np.log(t)
        with np.errstate(over="ignore", under="ignore"):
            return self._slope(u) * np.exp(self._eta(u)) / t

    def both(self, t):
        t = np.asarray(t, dtype=float)
        pos = t > 0
        tt = np.where(pos, t, 1e-12)
        u = np.log(tt)
        with np.errstate(over="ignore", under="ignore"):
            H = np.exp(self._eta(u))
        return np.where(pos, H, 0.0), self._slope(u) * H / tt

    def is_monotone(self) -> bool:
        """Whether ``s' >= 0`` everywhere (the tails are linear, so the knot span decides)."""
        k = self.baseline.knot_vector.knots
        grid = np.concatenate([[k[0] - 1.0, k[-1] + 1.0], np.linspace(k[0], k[-1], 400)])
        return bool(np.all(self._slope(grid) >= 0))


def _fit_newton(theta, D, max_iter, tol_rel, tol_grad):
    ll, g, H = _loglik(theta, D)
    if not np.isfinite(ll):
        return None
    for it in range(1, max_iter + 1):
        neg = -H
        try:
            np.linalg.cholesky(neg)
            step = np.linalg.solve(neg, g)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(0.5 * (neg + neg.T))
            shift = max(0.0, -w.min()) + 1e-6 * max(1.0, np.abs(w).max())
            step = V @ ((V.T @ g) / (w + shift))
        t = 1.0
        for _ in range(60):
            ll_new, g_new, H_new = _loglik(theta + t * step, D)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise ConvergenceError("flexible parametric fit: step halving failed")
        theta = theta + t * step
        rel = abs(ll_new - ll) / max(abs(ll_new), 1e-300)
        ll, g, H = ll_new, g_new, H_new
        if rel < tol_rel and np.abs(g).max() < tol_grad:
            return theta, ll, g, H, it
    raise ConvergenceError(f"flexible parametric fit did not converge in {max_iter} iterations")


def resolve_design(spec: FlexParamSpec, data: SurvivalData) -> tuple[SplineSpec, CovariateDesign]:
    ev = data.status == 1
    if ev.sum() == 0:
        raise ConfigError("cannot fit a transition model with zero events")
    if spec.knots is not None:
        kv = spec.knots
    else:
        kv = place_knots(data.exit[ev], spec.df, log_scale=True)
    baseline = orthogonalized(kv, np.log(data.exit[ev])) if spec.orthogonalize else SplineSpec(kv)
    terms = []
    for term in spec.splines:
        values = np.asarray(_lookup(data.covariates, term.name), dtype=float)
        tkv = term.knots or place_knots(values, term.df, log_scale=term.log)
        terms.append((term.name, orthogonalized(tkv, tkv.transform(values)) if spec.orthogonalize else SplineSpec(tkv)))
    return baseline, CovariateDesign(tuple(spec.covariates), tuple(terms))


def fit_flexparam(
    records: Sequence[SurvivalRecord] | SurvivalData,
    spec: FlexParamSpec,
    max_iter: int = 200,
    start: np.ndarray | None = None,
) -> FittedTransitionModel:
    """Maximum likelihood fit with delayed entry.

    Newton-Raphson on the analytic gradient and Hessian with step halving;
    an indefinite Hessian mid-path is replaced by an eigenvalue-shifted
    one. Covariate columns are centred and scaled internally. Convergence
    requires relative log-likelihood change below 1e-9 and a max-abs
    gradient below 1e-5 on that standardized scale.
    """
    data = records if isinstance(records, SurvivalData) else SurvivalData.from_records(records)
    baseline, cov = resolve_design(spec, data)
    p = 1 + baseline.df + cov.width
    D, M = _standardize(_build_design(data, baseline, cov, spec.kind), 1 + baseline.df)
    starts = [np.linalg.solve(M, np.asarray(start, dtype=float))] if start is not None else []
    na = _nelson_aalen_start(data, baseline, p)
    if na is not None:
        starts.append(na)
    starts.append(_weibull_start(data, baseline, p))
    result, err = None, None
    for phi0 in starts:
        try:
            result = _fit_newton(np.asarray(phi0, dtype=float), D, max_iter, 1e-9, 1e-5)
        except ConvergenceError as e:
            err = e
            continue
        if result is not None:
            break
    if result is None:
        raise err or ConvergenceError("no feasible starting values (non-positive hazard at events)")
    phi, ll, g, H_phi, it = result
    theta = M @ phi

    flags: dict[str, object] = {}
    neg = -H_phi
    try:
        np.linalg.cholesky(neg)
        vcov = np.linalg.inv(neg)
        flags["hessian_negative_definite"] = True
    except np.linalg.LinAlgError:
        warnings.warn("Hessian is not negative definite at the optimum; vcov is a pseudo-inverse")
        vcov = np.linalg.pinv(neg)
        flags["hessian_negative_definite"] = False
    vcov = M @ vcov @ M.T
    vcov = 0.5 * (vcov + vcov.T)
    ev = data.status == 1
    lt = np.log(data.exit[ev])
    grid = np.linspace(lt.min(), lt.max(), 200)
    flags["negative_hazard"] = bool(np.any(rcs_deriv(grid, baseline) @ theta[1 : 1 + baseline.df] < 0))
    flags["time_range"] = [float(data.exit[ev].min()), float(data.exit[ev].max())]
    flags["n_events"] = int(ev.sum())
    flags["n_rows"] = int(len(data))
    return FittedTransitionModel(
        spec=spec,
        baseline=baseline,
        design=cov,
        gamma=theta[: 1 + baseline.df],
        beta=theta[1 + baseline.df :],
        vcov=vcov,
        loglik=ll,
        converged=True,
        iterations=it,
        flags=flags,
    )


def loglik_gradient(model_or_spec, data: SurvivalData, theta, baseline=None, design=None):
    """Log-likelihood and analytic gradient at ``theta`` (for checking)."""
    if isinstance(model_or_spec, FittedTransitionModel):
        spec, baseline, design = model_or_spec.spec, model_or_spec.baseline, model_or_spec.design
    else:
        spec = model_or_spec
        if baseline is None or design is None:
            baseline, design = resolve_design(spec, data)
    D = _build_design(data, baseline, design, spec.kind)
    ll, g, _ = _loglik(np.asarray(theta, dtype=float), D, order=1)
    return ll, g


def loglik_hessian(model: FittedTransitionModel, data: SurvivalData, theta):
    D = _build_design(data, model.baseline, model.design, model.spec.kind)
    return _loglik(np.asarray(theta, dtype=float), D, order=2)


def cumhaz(model: FittedTransitionModel, tau, x=None):
    """Cumulative (excess, for excess models) hazard; 0 at ``tau = 0``."""
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(model.log_cumhaz(tau, x))
    return float(out) if np.ndim(out) == 0 else out


def hazard(model: FittedTransitionModel, tau, x=None):
    """Hazard ``s'(log tau) H / tau``; may be negative where the spline decreases."""
    tau = np.asarray(tau, dtype=float)
    gamma, _ = model._split(None)
    t = np.maximum(tau, 1e-12)
    slope = rcs_deriv(np.log(t), model.baseline) @ gamma[1:]
    out = slope * np.exp(model.log_cumhaz(t, x)) / t
    return float(out) if out.ndim == 0 else out


def survival(model: FittedTransitionModel, tau, x=None):
    """``exp(-H)``; relative survival for excess models."""
    out = np.exp(-np.asarray(cumhaz(model, tau, x)))
    return float(out) if out.ndim == 0 else out


class EventDraw(NamedTuple):
    time: float
    censored: bool


def draw_event_times(model, x, entry, unit_exponential, horizon, params=None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised inversion ``H(T) - H(entry) = E`` on ``(entry, horizon]``.

    Returns ``(times, censored)``; censored draws get ``time = horizon``.
    """
    entry = np.atleast_1d(np.asarray(entry, dtype=float))
    E = np.atleast_1d(np.asarray(unit_exponential, dtype=float))
    entry, E = np.broadcast_arrays(entry, E)
    curve = model.curve(x or {}, horizon, params)
    H_entry = curve.cumhaz(entry)
    target = H_entry + E
    cens = curve.cumhaz(np.full(entry.shape, float(horizon))) < target
    times = np.full(entry.shape, float(horizon))
    idx = np.flatnonzero(~cens)
    if idx.size:
        sub_entry = entry[idx]

        def F(t, act):
            return curve.both(t)

        times[idx] = solve_increasing(F, sub_entry, np.full(idx.size, float(horizon)), target[idx])
        times[idx] = np.maximum(times[idx], np.nextafter(sub_entry, np.inf))
    return times, cens


def draw_event_time(model, x, entry: float, unit_exponential: float, horizon: float) -> EventDraw:
    t, c = draw_event_times(model, x, entry, unit_exponential, horizon)
    return EventDraw(float(t[0]), bool(c[0]))


def mvn_factor(vcov: np.ndarray) -> np.ndarray:
    """Cholesky factor, falling back to an eigen factor for semi-definite input."""
    v = np.asarray(vcov, dtype=float)
    try:
        return np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (v + v.T))
        tol = 1e-10 * max(1.0, np.abs(w).max(initial=0.0))
        if w.min(initial=0.0) < -tol:
            raise np.linalg.LinAlgError("variance-covariance matrix is indefinite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample_parameters(model, rng: np.random.Generator, factor: np.ndarray | None = None) -> np.ndarray:
    """One draw from ``N(parameters, vcov)``."""
    mean = np.asarray(model.parameters, dtype=float)
    L = mvn_factor(model.vcov) if factor is None else factor
    return mean + L @ rng.standard_normal(mean.size)


def to_dict(model: FittedTransitionModel) -> dict:
    return {
        "schema": SCHEMA,
        "spec": model.spec.to_dict(),
        "baseline": model.baseline.to_dict(),
        "design": model.design.to_dict(),
        "parameter_names": model.parameter_names,
        "gamma": model.gamma.tolist(),
        "beta": model.beta.tolist(),
        "vcov": model.vcov.tolist(),
        "loglik": model.loglik,
        "converged": model.converged,
        "iterations": model.iterations,
        "flags": dict(model.flags),
    }


def from_dict(d: dict) -> FittedTransitionModel:
    if d.get("schema") != SCHEMA:
        raise SchemaError(f"not a transition model file (schema {d.get('schema')!r})")
    return FittedTransitionModel(
        spec=FlexParamSpec.from_dict(d["spec"]),
        baseline=SplineSpec.from_dict(d["baseline"]),
        design=CovariateDesign.from_dict(d["design"]),
        gamma=np.asarray(d["gamma"], dtype=float),
        beta=np.asarray(d["beta"], dtype=float),
        vcov=np.asarray(d["vcov"], dtype=float).reshape(len(d["gamma"]) + len(d["beta"]), -1),
        loglik=float(d["loglik"]),
        converged=bool(d["converged"]),
        iterations=int(d["iterations"]),
        flags=d.get("flags", {}),
    )


def dumps(model: FittedTransitionModel) -> str:
    return json.dumps(to_dict(model), indent=2) + "\n"


def save_model(model: FittedTransitionModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(model))


def load_model(path) -> FittedTransitionModel:
    with open(path) as fh:
        return from_dict(json.load(fh))
