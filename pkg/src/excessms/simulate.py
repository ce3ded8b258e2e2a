"""Monte Carlo trajectories through a fitted multi-state model.

Subjects start in the first state at time 0. In each state every
outgoing transition gets a latent event time by inverting its cumulative
hazard against a unit exponential; the subject moves along the earliest
one (``method="latent"``). The alternative ``"total_hazard"`` method draws
one time from the summed intensity and picks the destination in
proportion to the transition hazards at that time.

All models share one covariate pattern per run, so each transition is a
single curve in time and inversion is vectorised across subjects.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np
from scipy.integrate import solve_ivp

from . import rng as rngmod
from .errors import ConfigError
from .expected import ExpectedRateModel
from .flexsurv import FittedTransitionModel, mvn_factor
from .invert import solve_increasing
from .msm import TransitionMatrix

__all__ = [
    "SimConfig",
    "ConstantHazard",
    "SummedHazard",
    "TrajectorySample",
    "PredictionResult",
    "Quantity",
    "simulate",
    "transition_probabilities",
    "length_of_stay",
    "ever_visit",
    "proportion_excess",
    "contrast",
    "draw_parameters",
    "percentile_band",
    "bootstrap_ci",
    "predict_set",
    "ode_oracle",
]

HAZARD_FLOOR = 1e-12
TAB_POINTS = 2048
CHUNK = 1 << 16


@dataclass(frozen=True)
class SimConfig:
    n_point: int = 1_000_000
    n_ci: int = 10_000
    m_reps: int = 1_000
    horizon: float = 15.0
    time_grid: tuple[float, ...] | None = None
    seed: int = 0
    method: str = "latent"
    ci_level: float = 0.95
    threads: int | None = None

    def __post_init__(self):
        if min(self.n_point, self.n_ci, self.m_reps) < 1:
            raise ConfigError("n_point, n_ci and m_reps must be at least 1")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.method not in ("latent", "total_hazard"):
            raise ConfigError(f"unknown simulation method {self.method!r}")
        if not 0 < self.ci_level < 1:
            raise ConfigError("ci_level must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.time_grid is not None:
            object.__setattr__(self, "time_grid", tuple(float(t) for t in self.time_grid))
            self.grid()

    def grid(self) -> np.ndarray:
        """Evaluation times; 1,000 equally spaced points on [0, horizon] by default."""
        if self.time_grid is None:
            return np.linspace(0.0, self.horizon, 1000)
        return check_grid(self.time_grid, self.horizon)


def check_grid(grid, horizon: float) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ConfigError("time grid must be a non-empty list")
    if np.any(np.diff(g) <= 0):
        raise ConfigError("time grid must be strictly increasing")
    if g[0] < 0 or g[-1] > horizon:
        raise ConfigError(f"time grid outside [0, horizon={horizon}]")
    return g


# ---------------------------------------------------------------- simple models


class ConstantCurve:
    def __init__(self, rate: float):
        self.rate = float(rate)

    def cumhaz(self, t):
        return self.rate * np.asarray(t, dtype=float)

    def hazard(self, t):
        return np.full(np.shape(t), self.rate)

    def both(self, t):
        t = np.asarray(t, dtype=float)
        return self.rate * t, np.full(t.shape, self.rate)

    def is_monotone(self) -> bool:
        return True


@dataclass(frozen=True)
class ConstantHazard:
    """Constant transition intensity; ``variance`` feeds bootstrap draws of the rate."""

    rate: float
    variance: float = 0.0
    resample = True

    def __post_init__(self):
        if not self.rate >= 0:
            raise ConfigError("constant hazard must be non-negative")

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.rate])

    @property
    def vcov(self) -> np.ndarray:
        return np.array([[self.variance]])

    def curve(self, at, horizon, params=None) -> ConstantCurve:
        return ConstantCurve(self.rate if params is None else max(float(params[0]), 0.0))


class SumCurve:
    def __init__(self, curves):
        self.curves = list(curves)

    def cumhaz(self, t):
        return sum(c.cumhaz(t) for c in self.curves)

    def hazard(self, t):
        return sum(c.hazard(t) for c in self.curves)

    def both(self, t):
        H = h = 0.0
        for c in self.curves:
            a, b = _both(c, t)
            H, h = H + a, h + b
        return H, h

    def is_monotone(self) -> bool:
        return all(_monotone(c) for c in self.curves)


@dataclass(frozen=True)
class SummedHazard:
    """Intensity equal to the sum of several models on the same clock (not resampled)."""

    models: tuple
    resample = False

    @property
    def parameters(self) -> np.ndarray:
        return np.zeros(0)

    @property
    def vcov(self) -> np.ndarray:
        return np.zeros((0, 0))

    def curve(self, at, horizon, params=None) -> SumCurve:
        return SumCurve(m.curve(at, horizon) for m in self.models)


def _both(curve, t):
    if hasattr(curve, "both"):
        return curve.both(t)
    return curve.cumhaz(t), curve.hazard(t)


def _monotone(curve) -> bool:
    f = getattr(curve, "is_monotone", None)
    return True if f is None else bool(f())


class FlooredCurve:
    """Cumulative of ``max(h, floor)`` for curves whose hazard dips below zero."""

    def __init__(self, curve, horizon: float, floor: float = HAZARD_FLOOR, cells: int = 4096):
        self.raw, self.floor = curve, floor
        self.edges = np.linspace(0.0, horizon, cells + 1)
        self._x, self._w = np.polynomial.legendre.leggauss(8)
        lo, hi = self.edges[:-1, None], self.edges[1:, None]
        half = 0.5 * (hi - lo)
        h = curve.hazard(np.maximum(lo + half * (self._x + 1.0), 1e-12))
        self.active = np.any(h < floor, axis=1)
        pieces = (half * self._w * np.maximum(h, floor)).sum(axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(pieces)])

    def _cell(self, t):
        return np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.edges) - 2)

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        return np.maximum(self.raw.hazard(np.maximum(t, 1e-12)), self.floor)

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        i = self._cell(t)
        lo = self.edges[i]
        half = 0.5 * (t - lo)
        nodes = np.maximum(lo[..., None] + half[..., None] * (self._x + 1.0), 1e-12)
        part = (np.maximum(self.raw.hazard(nodes), self.floor) * self._w).sum(axis=-1) * half
        return self._cum[i] + part

    def both(self, t):
        return self.cumhaz(t), self.hazard(t)

    def hits(self, lo, hi) -> int:
        """Number of clock intervals ``[lo, hi]`` that pass through a floored cell."""
        c = np.concatenate([[0], np.cumsum(self.active)])
        a, b = self._cell(np.asarray(lo, dtype=float)), self._cell(np.asarray(hi, dtype=float))
        return int(np.count_nonzero(c[b + 1] - c[a] > 0))


class _Prepared:
    """A transition curve with a lookup table that brackets inversion targets."""

    def __init__(self, curve, horizon: float):
        self.floored = not _monotone(curve)
        self.curve = FlooredCurve(curve, horizon) if self.floored else curve
        self.grid = np.linspace(0.0, horizon, TAB_POINTS + 1)
        H = self.curve.cumhaz(self.grid)
        if not np.all(np.isfinite(H)):
            raise ConfigError("cumulative hazard is not finite over the horizon")
        self.table = np.maximum.accumulate(H)
        self.H_end = float(H[-1])

    def cumhaz(self, t):
        return self.curve.cumhaz(t)

    def both(self, t):
        return _both(self.curve, t)

    def bracket(self, lo, target):
        i = np.clip(np.searchsorted(self.table, target, side="left"), 1, self.grid.size - 1)
        blo = np.maximum(self.grid[i - 1], lo)
        return blo, np.maximum(self.grid[i], blo)

    def hits(self, lo, hi) -> int:
        return self.curve.hits(lo, hi) if self.floored else 0


class _Combined(_Prepared):
    """Sum of prepared curves on one clock (total-hazard method)."""

    def __init__(self, parts: Sequence[_Prepared]):
        self.parts = list(parts)
        self.floored = False
        self.grid = parts[0].grid
        self.table = sum(p.table for p in parts)
        self.H_end = float(sum(p.H_end for p in parts))

    def cumhaz(self, t):
        return sum(p.cumhaz(t) for p in self.parts)

    def both(self, t):
        H = h = 0.0
        for p in self.parts:
            a, b = p.both(t)
            H, h = H + a, h + b
        return H, h


# ---------------------------------------------------------------- engine


def _validate(models: Mapping[str, object], tmat: TransitionMatrix) -> None:
    for slot in tmat.slot_names:
        if slot not in models:
            raise ConfigError(f"unfilled model slot {slot!r}")
    for t in tmat.transitions:
        m = models[t.slot]
        if t.kind == "expected":
            if t.clock != "forward":
                raise ConfigError(f"transition {t.index}: an expected-rate transition must use the forward clock")
            if isinstance(m, FittedTransitionModel):
                raise ConfigError(f"transition {t.index} is population-rate but slot {t.slot!r} holds a survival model")
        elif isinstance(m, ExpectedRateModel):
            raise ConfigError(f"transition {t.index} is {t.kind} but slot {t.slot!r} holds a population-rate model")
        if isinstance(m, FittedTransitionModel):
            if m.spec.kind != t.kind:
                raise ConfigError(f"transition {t.index}: slot {t.slot!r} model is {m.spec.kind}, transition is {t.kind}")
            if m.spec.clock != t.clock:
                raise ConfigError(f"transition {t.index}: slot {t.slot!r} model uses the {m.spec.clock} clock, transition the {t.clock} clock")


def _longest_path(tmat: TransitionMatrix) -> int:
    depth = {0: 1}
    for s in tmat.topological_order():
        if s not in depth:
            continue
        for t in tmat.outgoing(s):
            depth[t.target] = max(depth.get(t.target, 0), depth[s] + 1)
    return max(depth.values())


class _Engine:
    def __init__(self, models, tmat: TransitionMatrix, at, horizon: float, params=None):
        _validate(models, tmat)
        params = params or {}
        self.tmat, self.horizon = tmat, float(horizon)
        self.prepared: dict[str, _Prepared] = {}
        self.extrapolated = False
        for slot in tmat.slot_names:
            curve = models[slot].curve(at, self.horizon, params.get(slot))
            if hasattr(curve, "extrapolated"):
                self.extrapolated |= bool(curve.extrapolated())
            self.prepared[slot] = _Prepared(curve, self.horizon)
        self.order = tmat.topological_order()
        self.out = {s: sorted(tmat.outgoing(s), key=lambda t: t.index) for s in range(tmat.n_states)}
        self.L = _longest_path(tmat)
        self.K = len(tmat.transitions)

    # -- one transition, latent time
    def _latent(self, tr, t_e, E):
        P = self.prepared[tr.slot]
        T = np.full(t_e.size, np.inf)
        if tr.clock == "forward":
            target = P.cumhaz(t_e) + E
            ok = target <= P.H_end
            lo, cap = t_e, None
        else:
            cap = self.horizon - t_e
            target = E
            ok = P.cumhaz(cap) >= E
            lo = np.zeros(t_e.size)
        idx = np.flatnonzero(ok)
        hits = 0
        if idx.size:
            blo, bhi = P.bracket(lo[idx], target[idx])
            if cap is not None:
                bhi = np.maximum(np.minimum(bhi, cap[idx]), blo)
            x = solve_increasing(lambda v, _a: P.both(v), blo, bhi, target[idx])
            T[idx] = x if cap is None else t_e[idx] + x
        if P.floored:
            end = np.minimum(T, self.horizon)
            hits = P.hits(lo, end) if cap is None else P.hits(lo, end - t_e)
        return T, hits

    def _total(self, trs, t_e, E, U):
        parts = [self.prepared[t.slot] for t in trs]
        clocks = {t.clock for t in trs}
        n = t_e.size
        T = np.full(n, np.inf)
        dest = np.full(n, -1)
        hits = 0
        if clocks == {"forward"} or clocks == {"reset"}:
            P = _Combined(parts)
            if clocks == {"forward"}:
                target, lo, cap = P.cumhaz(t_e) + E, t_e, None
                ok = target <= P.H_end
            else:
                cap = self.horizon - t_e
                target, lo = E, np.zeros(n)
                ok = P.cumhaz(cap) >= E
            idx = np.flatnonzero(ok)
            if idx.size:
                blo, bhi = P.bracket(lo[idx], target[idx])
                if cap is not None:
                    bhi = np.maximum(np.minimum(bhi, cap[idx]), blo)
                x = solve_increasing(lambda v, _a: P.both(v), blo, bhi, target[idx])
                T[idx] = x if cap is None else t_e[idx] + x
        else:
            fwd = [t.clock == "forward" for t in trs]

            def G(v, a, te):
                H = h = 0.0
                for P, f in zip(parts, fwd):
                    if f:
                        A, B = P.both(v)
                        A = A - P.cumhaz(te[a])
                    else:
                        A, B = P.both(v - te[a])
                    H, h = H + A, h + B
                return H, h

            end = G(np.full(n, self.horizon), np.arange(n), t_e)[0]
            idx = np.flatnonzero(end >= E)
            if idx.size:
                te = t_e[idx]
                T[idx] = solve_increasing(lambda v, a: G(v, a, te), te, np.full(idx.size, self.horizon), E[idx])
        idx = np.flatnonzero(np.isfinite(T))
        if idx.size:
            Ti = np.minimum(np.maximum(T[idx], np.nextafter(t_e[idx], np.inf)), self.horizon)
            T[idx] = Ti
            w = np.column_stack(
                [np.maximum(P.both(Ti if t.clock == "forward" else Ti - t_e[idx])[1], 0.0) for P, t in zip(parts, trs)]
            )
            tot = w.sum(axis=1)
            w = np.where(tot[:, None] > 0, w / np.where(tot > 0, tot, 1.0)[:, None], 1.0 / len(trs))
            c = np.cumsum(w, axis=1)
            dest[idx] = np.minimum((c <= U[idx, None]).sum(axis=1), len(trs) - 1)
        end = np.minimum(T, self.horizon)
        for P, t in zip(parts, trs):
            if P.floored:
                hits += P.hits(t_e, end) if t.clock == "forward" else P.hits(np.zeros(n), end - t_e)
        return T, dest, hits

    def run(self, seed: int, replicate: int, start: int, stop: int, method: str, tag: int):
        n = stop - start
        S = self.tmat.n_states
        width = self.K if method == "latent" else 2 * S
        U = rngmod.subject_uniforms(seed, replicate, start, stop, width, tag)
        state = np.zeros(n, dtype=np.int64)
        t_in = np.zeros(n)
        depth = np.zeros(n, dtype=np.int64)
        states = np.full((n, self.L), -1, dtype=np.int8)
        times = np.full((n, self.L), np.nan)
        states[:, 0] = 0
        times[:, 0] = 0.0
        hits = 0
        for s in self.order:
            trs = self.out[s]
            if not trs:
                continue
            idx = np.flatnonzero(state == s)
            if idx.size == 0:
                continue
            t_e = t_in[idx]
            if method == "latent":
                cols = []
                for tr in trs:
                    T, h = self._latent(tr, t_e, -np.log1p(-U[idx, tr.index - 1]))
                    cols.append(T)
                    hits += h
                M = np.column_stack(cols)
                j = np.argmin(M, axis=1)  # first minimum: lowest transition index wins ties
                Tmin = M[np.arange(idx.size), j]
            else:
                Tmin, j, h = self._total(trs, t_e, -np.log1p(-U[idx, 2 * s]), U[idx, 2 * s + 1])
                hits += h
            moved = np.isfinite(Tmin) & (Tmin > t_e) & (Tmin <= self.horizon)
            mi = idx[moved]
            dest = np.array([t.target for t in trs])[j[moved]]
            depth[mi] += 1
            state[mi] = dest
            t_in[mi] = Tmin[moved]
            states[mi, depth[mi]] = dest
            times[mi, depth[mi]] = Tmin[moved]
        return states, times, hits


# ---------------------------------------------------------------- samples


@dataclass(frozen=True)
class TrajectorySample:
    """Paths as padded arrays: ``states[i, j]`` entered at ``times[i, j]`` (``-1``/NaN after the end)."""

    states: np.ndarray
    times: np.ndarray
    tmat: TransitionMatrix
    horizon: float
    counters: Mapping[str, object] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def labels(self) -> tuple[str, ...]:
        return self.tmat.states

    def path(self, i: int) -> list[tuple[str, float]]:
        return [(self.labels[s], float(t)) for s, t in zip(self.states[i], self.times[i]) if s >= 0]

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "seq", "state", "entry_time"])
        for i in range(self.n):
            for j, (s, t) in enumerate(self.path(i)):
                w.writerow([i, j, s, repr(t)])


def simulate(
    models: Mapping[str, object],
    tmat: TransitionMatrix,
    at: Mapping[str, float],
    config: SimConfig,
    params: Mapping[str, np.ndarray] | None = None,
    replicate: int = 0,
    n: int | None = None,
    tag: int = rngmod.TRAJECTORY,
    threads: int | None = None,
) -> TrajectorySample:
    """Simulate ``n`` subjects (default ``config.n_point``) for one covariate pattern.

    ``params`` overrides model coefficients per slot. Subject ``i`` always
    uses substream ``(config.seed, replicate, i)``, so output does not
    depend on chunking or threads.
    """
    n = config.n_point if n is None else int(n)
    if n < 1:
        raise ConfigError("need at least one subject")
    eng = _Engine(models, tmat, at, config.horizon, params)
    bounds = [(a, min(a + CHUNK, n)) for a in range(0, n, CHUNK)]
    work = lambda b: eng.run(config.seed, replicate, b[0], b[1], config.method, tag)
    threads = _threads(config if threads is None else threads)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(min(threads, len(bounds))) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    states = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    counters = {"hazard_floor_hits": int(sum(p[2] for p in parts)), "expected_extrapolated": eng.extrapolated}
    if counters["hazard_floor_hits"]:
        warnings.warn(f"hazard floor used for {counters['hazard_floor_hits']} draws")
    return TrajectorySample(states, times, tmat, config.horizon, counters)


def _threads(x) -> int:
    if isinstance(x, SimConfig):
        x = x.threads
    return max(1, int(x if x is not None else (os.cpu_count() or 1)))


# ---------------------------------------------------------------- predictions


@dataclass(frozen=True)
class PredictionResult:
    kind: str
    time: np.ndarray
    labels: tuple[str, ...]
    estimate: np.ndarray  # (labels, time)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    counters: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.labels), len(self.time))
        if self.estimate.shape != shape:
            raise ValueError(f"estimate has shape {self.estimate.shape}, expected {shape}")
        for band in (self.lower, self.upper):
            if band is not None and band.shape != shape:
                raise ValueError("band shape does not match the estimate")

    def series(self, label: str, what: str = "estimate") -> np.ndarray:
        return getattr(self, what)[self.labels.index(label)]

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "state", "estimate", "lower", "upper"])
        for i, lab in enumerate(self.labels):
            for g, t in enumerate(self.time):
                lo = "" if self.lower is None else _num(self.lower[i, g])
                hi = "" if self.upper is None else _num(self.upper[i, g])
                w.writerow([_num(t), lab, _num(self.estimate[i, g]), lo, hi])


def _num(v) -> str:
    v = float(v)
    return "NA" if math.isnan(v) else repr(v)


def _state_view(sample: TrajectorySample, merge: bool):
    """State codes and labels, optionally with partitioned states merged."""
    if not merge or not sample.tmat.partitions:
        return sample.states, sample.labels
    obs, pos, _ = sample.tmat.merged()
    lut = np.array([pos[i] for i in range(sample.tmat.n_states)] + [-1], dtype=np.int8)
    return lut[sample.states], obs.states


def _segments(codes, times, n_labels):
    """Entry and exit times of every stay, by state."""
    exits = np.concatenate([times[:, 1:], np.full((times.shape[0], 1), np.nan)], axis=1)
    exits = np.where(np.isnan(exits), np.inf, exits)
    out = []
    for s in range(n_labels):
        m = codes == s
        out.append((times[m], exits[m]))
    return out


def _block(values, grid):
    """Index ``i`` with ``grid[i-1] < v <= grid[i]``; ``len(grid)`` beyond the end."""
    return np.searchsorted(grid, values, side="left")


def _count_le(values, grid):
    return np.cumsum(np.bincount(_block(values, grid), minlength=grid.size + 1))[: grid.size]


def _occupancy(sample, grid, merge):
    codes, labels = _state_view(sample, merge)
    G = grid.size
    cnt = np.zeros((len(labels), G))
    los = np.zeros((len(labels), G))
    dgrid = np.diff(grid, prepend=grid[0])
    for s, (e, x) in enumerate(_segments(codes, sample.times, len(labels))):
        occ = _count_le(e, grid) - _count_le(x, grid)
        cnt[s] = occ
        corr = np.zeros(G)
        for vals, sign in ((e, 1.0), (x, -1.0)):
            b = _block(vals, grid)
            m = b < G
            corr += sign * np.bincount(b[m], weights=grid[b[m]] - vals[m], minlength=G)
        prev = np.concatenate([[0.0], occ[:-1]])
        los[s] = np.cumsum(prev * dgrid + corr)
    return labels, cnt / sample.n, los / sample.n


def _first_entry(codes, times, states: Sequence[int]):
    first = np.full(codes.shape[0], np.inf)
    for j in range(codes.shape[1]):
        m = np.isin(codes[:, j], states)
        first[m] = np.minimum(first[m], times[m, j])
    return first


def _grid_for(sample, grid):
    return np.linspace(0.0, sample.horizon, 1000) if grid is None else check_grid(grid, sample.horizon)


def transition_probabilities(sample: TrajectorySample, grid=None, merge: bool = False) -> PredictionResult:
    """Fraction of subjects in each state at each grid time."""
    grid = _grid_for(sample, grid)
    labels, p, _ = _occupancy(sample, grid, merge)
    return PredictionResult("probability", grid, tuple(labels), p, counters=dict(sample.counters))


def length_of_stay(sample: TrajectorySample, grid=None, merge: bool = False) -> PredictionResult:
    """Mean time spent in each state over ``[0, t]``, exact from the path segments."""
    grid = _grid_for(sample, grid)
    labels, _, los = _occupancy(sample, grid, merge)
    return PredictionResult("los", grid, tuple(labels), los, counters=dict(sample.counters))


def ever_visit(sample: TrajectorySample, grid=None, merge: bool = False) -> PredictionResult:
    """Fraction of subjects whose path has entered each state by ``t``."""
    grid = _grid_for(sample, grid)
    codes, labels = _state_view(sample, merge)
    est = np.array([_count_le(_first_entry(codes, sample.times, [s]), grid) for s in range(len(labels))]) / sample.n
    return PredictionResult("ever_visit", grid, tuple(labels), est, counters=dict(sample.counters))


def proportion_excess(sample: TrajectorySample, grid=None, mode: str | None = None) -> PredictionResult:
    """Share of the illness probability carried by the excess component.

    ``mode="current_state"`` divides occupation probabilities,
    ``"ever_visited"`` divides probabilities of having entered. Points
    whose denominator is below ``10/n`` are NaN.
    """
    if mode not in ("current_state", "ever_visited"):
        raise ConfigError("proportion excess needs mode 'current_state' or 'ever_visited'")
    if not sample.tmat.partitions:
        raise ConfigError("proportion excess needs a partitioned illness state")
    grid = _grid_for(sample, grid)
    labels, rows = [], []
    undefined = 0
    for exc, exp in sample.tmat.partitions:
        if mode == "current_state":
            _, p, _ = _occupancy(sample, grid, False)
            num, den = p[exc], p[exc] + p[exp]
        else:
            num = _count_le(_first_entry(sample.states, sample.times, [exc]), grid) / sample.n
            den = _count_le(_first_entry(sample.states, sample.times, [exc, exp]), grid) / sample.n
        ok = den >= 10.0 / sample.n
        undefined += int((~ok).sum())
        rows.append(np.where(ok, num / np.where(ok, den, 1.0), np.nan))
        labels.append(sample.tmat.merged_labels.get(exc, sample.labels[exc]))
    counters = dict(sample.counters, undefined_points=undefined, mode=mode)
    return PredictionResult("proportion_excess", grid, tuple(labels), np.array(rows), counters=counters)


def _contrast_values(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "difference":
        return b - a
    if kind == "ratio":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a != 0, b / np.where(a != 0, a, 1.0), np.nan)
    raise ConfigError(f"unknown contrast {kind!r}")


def contrast(result_at1: PredictionResult, result_at2: PredictionResult, kind: str = "difference") -> PredictionResult:
    """``at2 - at1`` (or ``at2 / at1``; zero denominators give NaN)."""
    if result_at1.labels != result_at2.labels or not np.array_equal(result_at1.time, result_at2.time):
        raise ConfigError("contrast needs identical time grids and state sets")
    est = _contrast_values(result_at1.estimate, result_at2.estimate, kind)
    counters = {"undefined_points": int(np.isnan(est).sum())}
    return PredictionResult(f"{result_at1.kind}_{kind}", result_at1.time, result_at1.labels, est, counters=counters)


@dataclass(frozen=True)
class Quantity:
    """What to compute from a sample: ``probability``, ``los``, ``ever_visit`` or ``proportion_excess``."""

    kind: str = "probability"
    merge: bool = False
    mode: str | None = None

    def __post_init__(self):
        if self.kind not in _QUANTITIES:
            raise ConfigError(f"unknown quantity {self.kind!r}")
        if self.kind == "proportion_excess" and self.mode not in ("current_state", "ever_visited"):
            raise ConfigError("proportion excess needs an explicit mode: current_state or ever_visited")

    def __call__(self, sample: TrajectorySample, grid) -> PredictionResult:
        if self.kind == "proportion_excess":
            return proportion_excess(sample, grid, self.mode)
        return _QUANTITIES[self.kind](sample, grid, self.merge)


_QUANTITIES: dict[str, Callable] = {
    "probability": transition_probabilities,
    "los": length_of_stay,
    "ever_visit": ever_visit,
    "proportion_excess": proportion_excess,
}


# ---------------------------------------------------------------- bootstrap


def _factors(models: Mapping[str, object]) -> dict[str, np.ndarray]:
    out = {}
    for slot in sorted(models):
        m = models[slot]
        if getattr(m, "resample", False):
            try:
                out[slot] = mvn_factor(m.vcov)
            except np.linalg.LinAlgError:
                raise ConfigError(f"slot {slot!r}: variance-covariance matrix is not positive semi-definite") from None
    return out


def draw_parameters(models, seed: int, replicate: int, factors=None, tag: int = rngmod.PARAMETERS) -> dict[str, np.ndarray]:
    """One multivariate-normal draw per resampled slot (population-rate slots stay fixed).

    Slots are visited in sorted order, so a slot shared by several
    transitions gets a single draw.
    """
    factors = _factors(models) if factors is None else factors
    gen = rngmod.generator(seed, replicate, tag)
    out = {}
    for slot in sorted(factors):
        mean = np.asarray(models[slot].parameters, dtype=float)
        out[slot] = mean + factors[slot] @ gen.standard_normal(mean.size)
    return out


def percentile_band(replicates: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Linear-interpolation percentiles across the first axis (NaN replicates ignored)."""
    a = (1.0 - level) / 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        q = np.nanquantile(replicates, [a, 1.0 - a], axis=0)
    return q[0], q[1]


def bootstrap_ci(
    models: Mapping[str, object],
    tmat: TransitionMatrix,
    at: Mapping[str, float],
    config: SimConfig,
    quantity: Quantity = Quantity(),
    at2: Mapping[str, float] | None = None,
    contrast_kind: str = "difference",
    paired: bool = True,
    return_replicates: bool = False,
):
    """Point estimate at the MLE with parametric-bootstrap percentile bands.

    The point estimate is the ``n_point`` run at the fitted coefficients.
    Replicate ``r = 1..m_reps`` draws one coefficient vector per slot and
    simulates ``n_ci`` subjects. With ``at2`` the quantity is the contrast
    ``at2`` vs ``at``; ``paired`` runs both patterns on the same draws and
    substreams. Bands are widened where needed so they contain the point
    estimate (counted in ``band_widened``).
    """
    grid = config.grid()
    tag2 = rngmod.TRAJECTORY if paired else rngmod.TRAJECTORY_UNPAIRED

    def value(pattern, params, rep, n, tag, threads):
        s = simulate(models, tmat, pattern, config, params, rep, n, tag, threads)
        return quantity(s, grid)

    r1 = value(at, None, 0, config.n_point, rngmod.TRAJECTORY, None)
    point = r1 if at2 is None else contrast(r1, value(at2, None, 0, config.n_point, tag2, None), contrast_kind)
    factors = _factors(models)

    def replicate(r):
        p1 = draw_parameters(models, config.seed, r, factors)
        v = value(at, p1, r, config.n_ci, rngmod.TRAJECTORY, 1).estimate
        if at2 is None:
            return v
        p2 = p1 if paired else draw_parameters(models, config.seed, r, factors, rngmod.PARAMETERS_UNPAIRED)
        return _contrast_values(v, value(at2, p2, r, config.n_ci, tag2, 1).estimate, contrast_kind)

    reps_idx = range(1, config.m_reps + 1)
    threads = _threads(config)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            reps = np.stack(list(ex.map(replicate, reps_idx)))
    else:
        reps = np.stack([replicate(r) for r in reps_idx])
    result = _with_band(point, reps, config)
    return (result, reps) if return_replicates else result


def _with_band(point: PredictionResult, reps: np.ndarray, config: SimConfig) -> PredictionResult:
    lower, upper = percentile_band(reps, config.ci_level)
    est = point.estimate
    widen = np.isfinite(est) & np.isfinite(lower) & ((est < lower) | (est > upper))
    lower = np.where(np.isfinite(est), np.fmin(lower, est), lower)
    upper = np.where(np.isfinite(est), np.fmax(upper, est), upper)
    counters = dict(point.counters, m_reps=config.m_reps, n_ci=config.n_ci, band_widened=int(widen.sum()))
    return PredictionResult(point.kind, point.time, point.labels, est, lower, upper, counters)


def predict_set(
    models: Mapping[str, object],
    tmat: TransitionMatrix,
    patterns: Mapping[str, Mapping[str, float]],
    config: SimConfig,
    quantities: Mapping[str, Quantity],
    contrasts: Sequence[tuple[str, str, str, str]] = (),
    ci: bool = True,
) -> dict[str, PredictionResult]:
    """Several quantities and paired contrasts from one simulation per pattern.

    Results are keyed ``"<quantity>/<pattern>"`` and, for each contrast
    ``(name, quantity, pattern_1, pattern_2)`` with name ``difference`` or
    ``ratio``, ``"<quantity>_<name>/<pattern_1>:<pattern_2>"``. Every pattern
    sees the same coefficient draws and substreams, matching
    :func:`bootstrap_ci` with ``paired=True``.
    """
    if not patterns:
        raise ConfigError("no covariate pattern to predict at")
    for name, q, a, b in contrasts:
        if q not in quantities or a not in patterns or b not in patterns:
            raise ConfigError(f"contrast {name!r} refers to an unknown quantity or pattern")
    grid = config.grid()

    def evaluate(params, rep, n, threads):
        out, raw = {}, {}
        for pname, at in patterns.items():
            s = simulate(models, tmat, at, config, params, rep, n, rngmod.TRAJECTORY, threads)
            for qname, q in quantities.items():
                raw[qname, pname] = q(s, grid)
                out[f"{qname}/{pname}"] = raw[qname, pname]
        for name, q, a, b in contrasts:
            out[f"{q}_{name}/{a}:{b}"] = contrast(raw[q, a], raw[q, b], name)
        return out

    point = evaluate(None, 0, config.n_point, None)
    if not ci:
        return point
    factors = _factors(models)

    def replicate(r):
        res = evaluate(draw_parameters(models, config.seed, r, factors), r, config.n_ci, 1)
        return {k: v.estimate for k, v in res.items()}

    reps_idx = range(1, config.m_reps + 1)
    threads = _threads(config)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            reps = list(ex.map(replicate, reps_idx))
    else:
        reps = [replicate(r) for r in reps_idx]
    return {k: _with_band(v, np.stack([r[k] for r in reps]), config) for k, v in point.items()}


# ---------------------------------------------------------------- ODE oracle


def ode_oracle(models, tmat: TransitionMatrix, at: Mapping[str, float], time_grid, horizon: float | None = None) -> PredictionResult:
    """State occupation from the forward equations ``dP/dt = P Q(t)``.

    Markov (all clocks forward) models only; integrated with an adaptive
    8th-order Runge-Kutta method.
    """
    if not tmat.is_markov():
        raise ConfigError("the forward-equation oracle needs every transition on the forward clock")
    _validate(models, tmat)
    grid = np.asarray(time_grid, dtype=float)
    horizon = float(grid[-1] if horizon is None else horizon)
    grid = check_grid(grid, horizon)
    curves = {slot: models[slot].curve(at, horizon) for slot in tmat.slot_names}
    trs = tmat.transitions
    S = tmat.n_states

    def rhs(t, p):
        tt = max(t, 1e-12)
        dp = np.zeros(S)
        for tr in trs:
            h = max(float(np.asarray(curves[tr.slot].hazard(np.array([tt])))[0]), 0.0)
            flow = p[tr.source] * h
            dp[tr.source] -= flow
            dp[tr.target] += flow
        return dp

    p0 = np.zeros(S)
    p0[0] = 1.0
    if grid[-1] == 0.0:
        est = np.repeat(p0[:, None], grid.size, axis=1)
    else:
        sol = solve_ivp(rhs, (0.0, grid[-1]), p0, method="DOP853", t_eval=grid, rtol=1e-10, atol=1e-12)
        if not sol.success:
            raise ConfigError(f"forward-equation integration failed: {sol.message}")
        est = sol.y
    return PredictionResult("probability", grid, tmat.states, est, counters={"method": "ode"})
