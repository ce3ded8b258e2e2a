"""Restricted cubic spline bases.

The basis for knots ``k_1 < ... < k_K`` is ``[x, v_2(x), ..., v_{K-1}(x)]`` with

    v_j(x) = (x - k_j)_+^3 - l_j (x - k_1)_+^3 - (1 - l_j) (x - k_K)_+^3,
    l_j = (k_K - k_j) / (k_K - k_1),

which is cubic between the boundary knots and linear outside them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "KnotVector",
    "SplineSpec",
    "place_knots",
    "rcs_basis",
    "rcs_deriv",
    "rcs_deriv2",
    "orthogonalize_basis",
    "orthogonalized",
]


@dataclass(frozen=True)
class KnotVector:
    """Ordered knot locations on the modelling scale.

    When ``scale_is_log`` is set the knots are stored as logs and raw
    inputs must be log-transformed (see :meth:`transform`) before basis
    evaluation.
    """

    knots: tuple[float, ...]
    scale_is_log: bool = False

    def __post_init__(self):
        k = tuple(float(v) for v in self.knots)
        if len(k) < 2:
            raise ValueError("a knot vector needs at least two knots")
        if not all(np.isfinite(k)):
            raise ValueError("knots must be finite")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ValueError(f"knots must be strictly increasing, got {k}")
        object.__setattr__(self, "knots", k)

    @property
    def df(self) -> int:
        return len(self.knots) - 1

    @property
    def boundary(self) -> tuple[float, float]:
        return self.knots[0], self.knots[-1]

    def transform(self, x):
        """Map raw values onto the modelling scale."""
        x = np.asarray(x, dtype=float)
        if self.scale_is_log:
            if np.any(x <= 0):
                raise ValueError("log-scale spline requires positive inputs")
            return np.log(x)
        return x

    def to_dict(self) -> dict:
        return {"knots": list(self.knots), "log": self.scale_is_log}

    @classmethod
    def from_dict(cls, d: dict) -> "KnotVector":
        return cls(tuple(d["knots"]), bool(d.get("log", False)))


@dataclass(frozen=True)
class SplineSpec:
    """A knot vector plus an optional orthogonalising transform.

    ``transform`` is the upper-triangular ``R`` from :func:`orthogonalize_basis`;
    when present the evaluated basis is ``B @ inv(R)``.
    """

    knot_vector: KnotVector
    orthogonalize: bool = False
    transform: np.ndarray | None = None

    def __post_init__(self):
        if self.transform is not None:
            r = np.array(self.transform, dtype=float)
            if r.shape != (self.df, self.df):
                raise ValueError("transform shape does not match basis dimension")
            object.__setattr__(self, "transform", r)

    @property
    def df(self) -> int:
        return self.knot_vector.df

    def _unmix(self, b: np.ndarray) -> np.ndarray:
        if self.transform is None:
            return b
        # b @ inv(R) without forming the inverse
        return np.linalg.solve(self.transform.T, b.T).T

    def to_dict(self) -> dict:
        d = {"knot_vector": self.knot_vector.to_dict(), "orthogonalize": self.orthogonalize}
        d["transform"] = None if self.transform is None else self.transform.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplineSpec":
        tr = d.get("transform")
        return cls(
            KnotVector.from_dict(d["knot_vector"]),
            bool(d.get("orthogonalize", False)),
            None if tr is None else np.asarray(tr, dtype=float),
        )


def place_knots(values: Sequence[float], df: int, log_scale: bool = False) -> KnotVector:
    """Boundary knots at min/max, interior knots at equally spaced centiles.

    Centiles use the averaged inverted empirical CDF (the sort-and-index
    definition), computed after the log transform when ``log_scale``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot place knots on an empty sample")
    if df < 1:
        raise ValueError("df must be at least 1")
    if log_scale:
        if np.any(v <= 0):
            raise ValueError("log-scale knots require positive values")
        v = np.log(v)
    probs = np.linspace(0.0, 100.0, df + 1)
    inner = np.percentile(v, probs[1:-1], method="averaged_inverted_cdf") if df > 1 else []
    knots = np.concatenate([[v.min()], np.atleast_1d(inner), [v.max()]])
    if np.any(np.diff(knots) <= 0):
        raise ValueError(
            f"duplicate knots {knots.tolist()}: too few distinct values for df={df}"
        )
    return KnotVector(tuple(knots.tolist()), log_scale)


def _as_spec(spec) -> SplineSpec:
    return spec if isinstance(spec, SplineSpec) else SplineSpec(spec)


def _raw(x, knots: tuple[float, ...], order: int) -> np.ndarray:
    """Unorthogonalised basis (order 0) or its first/second derivative."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots)
    kmin, kmax = k[0], k[-1]
    out = np.empty(x.shape + (len(k) - 1,))
    out[..., 0] = x if order == 0 else (1.0 if order == 1 else 0.0)
    if len(k) > 2:
        lam = (kmax - k[1:-1]) / (kmax - kmin)
        xe = x[..., None]

        def pos(z):
            zp = np.maximum(z, 0.0)
            if order == 0:
                return zp**3
            if order == 1:
                return 3.0 * zp**2
            return 6.0 * zp

        out[..., 1:] = (
            pos(xe - k[1:-1]) - lam * pos(xe - kmin) - (1.0 - lam) * pos(xe - kmax)
        )
    return out


def rcs_basis(x, spec) -> np.ndarray:
    """Evaluate the basis; the trailing axis has length ``df``.

    ``x`` must already be on the modelling scale.
    """
    spec = _as_spec(spec)
    return spec._unmix(_raw(x, spec.knot_vector.knots, 0))


def rcs_deriv(x, spec) -> np.ndarray:
    """First derivative of every basis function with respect to ``x``."""
    spec = _as_spec(spec)
    return spec._unmix(_raw(x, spec.knot_vector.knots, 1))


def rcs_deriv2(x, spec) -> np.ndarray:
    spec = _as_spec(spec)
    return spec._unmix(_raw(x, spec.knot_vector.knots, 2))


def orthogonalize_basis(design) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormalise design columns.

    Returns ``(Q, R)`` with ``design == Q @ R``, ``Q`` having orthonormal
    columns and ``R`` upper triangular with a positive diagonal (the
    Gram-Schmidt convention, so an already orthonormal design comes back
    unchanged with ``R = I``).
    """
    a = np.asarray(design, dtype=float)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ValueError("design must be a tall 2-D matrix")
    q, r = np.linalg.qr(a)
    d = np.diag(r)
    tol = max(a.shape) * np.finfo(float).eps * max(1.0, np.abs(d).max(initial=0.0))
    if np.any(np.abs(d) <= tol):
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    sign = np.where(d < 0, -1.0, 1.0)
    return q * sign, r * sign[:, None]


def orthogonalized(knot_vector: KnotVector, x) -> SplineSpec:
    """Spec whose basis is orthonormal over the sample ``x`` (modelling scale)."""
    _, r = orthogonalize_basis(_raw(np.asarray(x, dtype=float).ravel(), knot_vector.knots, 0))
    return SplineSpec(knot_vector, True, r)
