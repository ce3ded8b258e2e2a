"""Transition structure and stacked (long-format) multi-state data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, SchemaError

__all__ = [
    "Transition",
    "TransitionMatrix",
    "MultiStateDataset",
    "WideRecord",
    "build_tmat_illness_death",
    "build_tmat_illness_death_partitioned",
    "msset",
    "reconstruct_paths",
    "load_wide",
    "DAYS_PER_YEAR",
]

DAYS_PER_YEAR = 365.24
KINDS = ("expected", "excess", "all_cause")
CLOCKS = ("forward", "reset")


@dataclass(frozen=True)
class Transition:
    index: int  # 1-based
    source: int  # 0-based state positions
    target: int
    slot: str
    clock: str
    kind: str


@dataclass(frozen=True)
class TransitionMatrix:
    """States, transition indices, model slots and clock rules.

    ``grid[i][j]`` holds the 1-based index of the transition from state
    ``i`` to state ``j`` or ``None``. ``partitions`` lists
    (excess component, expected component) pairs of state positions that
    together make up one observable state.
    """

    states: tuple[str, ...]
    grid: tuple[tuple[int | None, ...], ...]
    slots: Mapping[int, str]
    clocks: Mapping[int, str]
    kinds: Mapping[int, str]
    partitions: tuple[tuple[int, int], ...] = ()
    merged_labels: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.states)
        if len(self.grid) != n or any(len(r) != n for r in self.grid):
            raise ConfigError("transition grid must be square with one row per state")
        idx = sorted(v for r in self.grid for v in r if v is not None)
        if idx != list(range(1, len(idx) + 1)):
            raise ConfigError("transition indices must be consecutive from 1")
        for i in range(n):
            if self.grid[i][i] is not None:
                raise ConfigError(f"state {self.states[i]!r} has a transition into itself")
        for k in idx:
            if k not in self.slots:
                raise ConfigError(f"transition {k} has no model slot")
            if self.clocks.get(k, "forward") not in CLOCKS:
                raise ConfigError(f"transition {k}: unknown clock {self.clocks.get(k)!r}")
            if self.kinds.get(k, "all_cause") not in KINDS:
                raise ConfigError(f"transition {k}: unknown model kind {self.kinds.get(k)!r}")
        for exc, exp in self.partitions:
            for j in range(n):
                a, b = self.grid[exc][j], self.grid[exp][j]
                if (a is None) != (b is None):
                    raise ConfigError("partition components must have the same onward transitions")
                if a is not None and self.slots[a] != self.slots[b]:
                    raise ConfigError(
                        f"transitions {a} and {b} leave the two components of one state "
                        "for the same destination and must share a model slot"
                    )
        if self._order() is None:
            raise ConfigError("transition structure must be acyclic")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def transitions(self) -> list[Transition]:
        out = []
        for i, row in enumerate(self.grid):
            for j, k in enumerate(row):
                if k is not None:
                    out.append(
                        Transition(k, i, j, self.slots[k], self.clocks.get(k, "forward"), self.kinds.get(k, "all_cause"))
                    )
        return sorted(out, key=lambda t: t.index)

    def transition(self, index: int) -> Transition:
        for t in self.transitions:
            if t.index == index:
                return t
        raise ConfigError(f"unknown transition {index}")

    def outgoing(self, state: int) -> list[Transition]:
        return [t for t in self.transitions if t.source == state]

    def absorbing(self) -> list[int]:
        return [i for i in range(self.n_states) if not self.outgoing(i)]

    def _order(self):
        indeg = [0] * len(self.states)
        for t in self.transitions:
            indeg[t.target] += 1
        ready = [i for i, d in enumerate(indeg) if d == 0]
        order = []
        while ready:
            s = ready.pop(0)
            order.append(s)
            for t in self.outgoing(s):
                indeg[t.target] -= 1
                if indeg[t.target] == 0:
                    ready.append(t.target)
        return order if len(order) == len(self.states) else None

    def topological_order(self) -> list[int]:
        return self._order()

    @property
    def slot_names(self) -> list[str]:
        return sorted(set(self.slots.values()))

    def is_markov(self) -> bool:
        return all(t.clock == "forward" for t in self.transitions)

    def state_index(self, label: str) -> int:
        return self.states.index(label)

    def merged(self) -> tuple["TransitionMatrix", dict[int, int], dict[int, int | None]]:
        """Collapse partitioned states into observable ones.

        Returns the merged matrix, a map from old to new state positions and
        a map from old to new transition indices (``None`` for transitions
        into an expected component, which carry no patient-level likelihood).
        """
        if not self.partitions:
            return self, {i: i for i in range(self.n_states)}, {t.index: t.index for t in self.transitions}
        drop = {exp for _, exp in self.partitions}
        keep = [i for i in range(self.n_states) if i not in drop]
        pos = {old: new for new, old in enumerate(keep)}
        for exc, exp in self.partitions:
            pos[exp] = pos[exc]
        labels = tuple(self.merged_labels.get(i, self.states[i]) for i in keep)
        new_grid = [[None] * len(keep) for _ in keep]
        tmap: dict[int, int | None] = {}
        slots, clocks, kinds = {}, {}, {}
        counter = 0
        for t in self.transitions:
            if t.source in drop or t.target in drop:
                continue
            counter += 1
            new_grid[pos[t.source]][pos[t.target]] = counter
            tmap[t.index] = counter
            slots[counter], clocks[counter] = t.slot, t.clock
            kinds[counter] = "all_cause"
        for t in self.transitions:
            if t.source in drop:
                exc = next(e for e, x in self.partitions if x == t.source)
                tmap[t.index] = tmap[self.grid[exc][t.target]]
            elif t.target in drop:
                tmap[t.index] = None
        out = TransitionMatrix(
            labels,
            tuple(tuple(r) for r in new_grid),
            slots,
            clocks,
            kinds,
        )
        return out, pos, tmap


def build_tmat_illness_death(reset_after_illness: bool = True) -> TransitionMatrix:
    """Observable illness-death structure with separate death states.

    Transitions: 1 alive->ill, 2 alive->dead_before, 3 ill->dead_after.
    """
    grid = (
        (None, 1, 2, None),
        (None, None, None, 3),
        (None, None, None, None),
        (None, None, None, None),
    )
    return TransitionMatrix(
        ("alive", "ill", "dead_before", "dead_after"),
        grid,
        {1: "illness", 2: "death", 3: "post_illness_death"},
        {1: "forward", 2: "forward", 3: "reset" if reset_after_illness else "forward"},
        {1: "all_cause", 2: "all_cause", 3: "all_cause"},
    )


def build_tmat_illness_death_partitioned(reset_after_illness: bool = True) -> TransitionMatrix:
    """Five-state structure with the illness state split into components.

    State order and transition numbering follow the transition
    matrix ``(.,1,2,3,. \\ .,.,.,.,4 \\ .,.,.,.,5 \\ . \\ .)``:

    ====  ==============  ====================================
    pos   label           role
    ====  ==============  ====================================
    0     alive           initial state
    1     ill_expected    illness expected without the disease
    2     ill_excess      illness in excess of expected
    3     dead_before     death before illness
    4     dead_after      death after illness
    ====  ==============  ====================================

    Transition 1 (alive->ill_expected) is the population rate model,
    2 (alive->ill_excess) the excess-hazard model, 3 death before
    illness, and 4/5 leave the two illness components through one shared
    post-illness mortality model on the reset clock.
    """
    clock = "reset" if reset_after_illness else "forward"
    grid = (
        (None, 1, 2, 3, None),
        (None, None, None, None, 4),
        (None, None, None, None, 5),
        (None, None, None, None, None),
        (None, None, None, None, None),
    )
    return TransitionMatrix(
        ("alive", "ill_expected", "ill_excess", "dead_before", "dead_after"),
        grid,
        {1: "expected", 2: "excess", 3: "death", 4: "post_illness_death", 5: "post_illness_death"},
        {1: "forward", 2: "forward", 3: "forward", 4: clock, 5: clock},
        {1: "expected", 2: "excess", 3: "all_cause", 4: "all_cause", 5: "all_cause"},
        partitions=((2, 1),),
        merged_labels={2: "ill"},
    )


@dataclass(frozen=True)
class MultiStateDataset:
    """Stacked rows, one per patient per transition at risk.

    Times are on the diagnosis clock. ``covariates`` holds every other
    column (including ``a0``/``c0`` and any attached expected rates).
    """

    id: np.ndarray
    trans: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    status: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.id)
        for name in ("trans", "start", "stop", "status"):
            if len(getattr(self, name)) != n:
                raise SchemaError("dataset columns have unequal lengths")
        for k, v in self.covariates.items():
            if len(v) != n:
                raise SchemaError(f"covariate {k!r} has the wrong length")
        if n and np.any(self.stop <= self.start):
            raise SchemaError("every row needs stop > start")
        if n and np.any(self.start < 0):
            raise SchemaError("negative start time")
        if n and not np.all(np.isin(self.status, (0, 1))):
            raise SchemaError("status must be 0 or 1")

    def __len__(self):
        return len(self.id)

    def with_column(self, name: str, values) -> "MultiStateDataset":
        cov = dict(self.covariates)
        cov[name] = np.asarray(values)
        return MultiStateDataset(self.id, self.trans, self.start, self.stop, self.status, cov)

    def subset(self, mask) -> "MultiStateDataset":
        mask = np.asarray(mask)
        return MultiStateDataset(
            self.id[mask],
            self.trans[mask],
            self.start[mask],
            self.stop[mask],
            self.status[mask],
            {k: v[mask] for k, v in self.covariates.items()},
        )

    def for_transition(self, trans: int) -> "MultiStateDataset":
        return self.subset(self.trans == trans)

    def clock_times(self, clock: str) -> tuple[np.ndarray, np.ndarray]:
        """(entry, exit) on the requested clock."""
        if clock == "forward":
            return self.start.astype(float), self.stop.astype(float)
        if clock == "reset":
            return np.zeros(len(self)), (self.stop - self.start).astype(float)
        raise ConfigError(f"unknown clock {clock!r}")

    def to_csv(self, fh: TextIO) -> None:
        names = list(self.covariates)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "trans", "start", "stop", "status", *names])
        for i in range(len(self)):
            row = [_fmt(self.id[i]), int(self.trans[i]), repr(float(self.start[i])), repr(float(self.stop[i])), int(self.status[i])]
            row.extend(_fmt(self.covariates[k][i]) for k in names)
            w.writerow(row)

    @classmethod
    def from_csv(cls, fh: TextIO) -> "MultiStateDataset":
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty long-format file") from None
        required = ["id", "trans", "start", "stop", "status"]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"long-format file missing column(s): {', '.join(missing)}")
        rows = [r for r in reader if r]
        cols = {h: [r[j] for r in rows] for j, h in enumerate(header)}
        try:
            num = {h: np.asarray([float(v) for v in cols[h]]) for h in header if h != "id"}
        except ValueError as e:
            raise SchemaError(f"non-numeric cell in long-format file: {e}") from None
        ids = np.asarray(cols["id"])
        try:
            ids = ids.astype(np.int64)
        except ValueError:
            pass
        return cls(
            ids,
            num["trans"].astype(np.int64),
            num["start"],
            num["stop"],
            num["status"].astype(np.int64),
            {h: num[h] for h in header if h not in required},
        )


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    f = float(v)
    if np.isnan(f):
        return "nan"
    return str(int(f)) if f.is_integer() and abs(f) < 2**53 else repr(f)


@dataclass(frozen=True)
class WideRecord:
    """One patient: observed event times by event type plus end of follow-up.

    ``events`` maps event type (e.g. ``"ill"``, ``"dead"``) to the time it
    occurred; unobserved types are absent. ``censor_time`` is the end of
    follow-up, equal to the last event time when the patient is absorbed.
    """

    id: object
    events: Mapping[str, float]
    censor_time: float
    covariates: Mapping[str, float] = field(default_factory=dict)


ILLNESS_DEATH_EVENTS = {"ill": ("ill",), "dead": ("dead_before", "dead_after")}


def msset(
    records: Sequence[WideRecord],
    tmat: TransitionMatrix,
    event_states: Mapping[str, Sequence[str]] | None = None,
    min_interval: float = 1.0 / DAYS_PER_YEAR,
) -> MultiStateDataset:
    """Reshape wide patient records into one row per transition at risk.

    A partitioned matrix is collapsed first: the components of the
    illness state cannot be told apart in patient data, so rows refer to
    the merged (observable) matrix and the population-rate transition gets
    no rows. ``event_states`` says which destination states each event type
    may lead to; the transition taken is the one from the current state
    into that set.
    """
    obs, _, _ = tmat.merged()
    event_states = event_states or ILLNESS_DEATH_EVENTS
    label_to_pos = {s: i for i, s in enumerate(obs.states)}
    dest = {}
    for ev, labels in event_states.items():
        unknown = [lab for lab in labels if lab not in label_to_pos]
        if unknown:
            raise ConfigError(f"event type {ev!r} maps to unknown state(s) {unknown}")
        dest[ev] = {label_to_pos[lab] for lab in labels}
    cov_names = sorted({k for r in records for k in r.covariates})
    out = {k: [] for k in ("id", "trans", "start", "stop", "status")}
    cov = {k: [] for k in cov_names}
    for rec in records:
        events = sorted(rec.events.items(), key=lambda kv: (kv[1], kv[0]))
        if rec.censor_time < 0 or any(t < 0 for _, t in events):
            raise SchemaError(f"patient {rec.id}: negative time")
        if any(t > rec.censor_time for _, t in events):
            raise SchemaError(f"patient {rec.id}: event after end of follow-up")
        for (e1, t1), (e2, t2) in zip(events, events[1:]):
            if t2 - t1 < min_interval - 1e-12:
                raise SchemaError(
                    f"patient {rec.id}: events {e1!r} and {e2!r} less than the minimum interval apart"
                )
        state, t = 0, 0.0
        for ev, te in events:
            if ev not in dest:
                raise SchemaError(f"patient {rec.id}: unknown event type {ev!r}")
            outs = obs.outgoing(state)
            taken = [tr for tr in outs if tr.target in dest[ev]]
            if not taken:
                raise SchemaError(f"patient {rec.id}: event {ev!r} not possible from state {obs.states[state]!r}")
            if te <= t:
                raise SchemaError(f"patient {rec.id}: event {ev!r} at or before entry to current state")
            for tr in outs:
                _row(out, cov, rec, tr.index, t, te, int(tr is taken[0]))
            state, t = taken[0].target, te
        outs = obs.outgoing(state)
        if outs and rec.censor_time > t:
            for tr in outs:
                _row(out, cov, rec, tr.index, t, rec.censor_time, 0)
        elif outs and rec.censor_time < t:
            raise SchemaError(f"patient {rec.id}: censoring before last event")
    return MultiStateDataset(
        np.asarray(out["id"]),
        np.asarray(out["trans"], dtype=np.int64),
        np.asarray(out["start"], dtype=float),
        np.asarray(out["stop"], dtype=float),
        np.asarray(out["status"], dtype=np.int64),
        {k: np.asarray(v, dtype=float) for k, v in cov.items()},
    )


def _row(out, cov, rec, trans, start, stop, status):
    out["id"].append(rec.id)
    out["trans"].append(trans)
    out["start"].append(start)
    out["stop"].append(stop)
    out["status"].append(status)
    for k in cov:
        cov[k].append(rec.covariates.get(k, np.nan))


def reconstruct_paths(
    data: MultiStateDataset,
    tmat: TransitionMatrix,
    event_states: Mapping[str, Sequence[str]] | None = None,
) -> list[WideRecord]:
    """Inverse of :func:`msset` (wide records in order of first appearance)."""
    obs, _, _ = tmat.merged()
    event_states = event_states or ILLNESS_DEATH_EVENTS
    state_event = {}
    for ev, labels in event_states.items():
        for lab in labels:
            state_event[obs.state_index(lab)] = ev
    target = {t.index: t.target for t in obs.transitions}
    order, groups = [], {}
    for i, pid in enumerate(data.id.tolist()):
        if pid not in groups:
            groups[pid] = []
            order.append(pid)
        groups[pid].append(i)
    out = []
    for pid in order:
        rows = groups[pid]
        events = {}
        for i in rows:
            if data.status[i] == 1:
                events[state_event[target[int(data.trans[i])]]] = float(data.stop[i])
        end = max(float(data.stop[i]) for i in rows)
        covs = {k: float(v[rows[0]]) for k, v in data.covariates.items()}
        out.append(WideRecord(pid, events, end, covs))
    return out


def load_wide(
    fh: TextIO,
    event_types: Sequence[str] = ("ill", "dead"),
    scale: float = 1.0,
    covariates: Sequence[str] | None = None,
) -> list[WideRecord]:
    """Read Stata-style wide data: ``id``, ``<ev>``, ``<ev>_time`` per event type.

    For an unflagged event type the time column holds the censoring time.
    Times are divided by ``scale`` (365.24 converts days to years).
    """
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise SchemaError("empty wide-format file")
    header = [h.strip() for h in reader.fieldnames]
    need = ["id"] + [c for ev in event_types for c in (ev, f"{ev}_time")]
    missing = [c for c in need if c not in header]
    if missing:
        raise SchemaError(f"wide-format file missing column(s): {', '.join(missing)}")
    if covariates is None:
        covariates = [h for h in header if h not in need]
    out = []
    for lineno, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items()}
        try:
            flags = {ev: int(float(row[ev])) for ev in event_types}
            times = {ev: float(row[f"{ev}_time"]) / scale for ev in event_types}
            cov = {c: float(row[c]) for c in covariates}
        except (ValueError, KeyError) as e:
            raise SchemaError(f"line {lineno}: bad value ({e})") from None
        events = {ev: times[ev] for ev in event_types if flags[ev] == 1}
        end = max(times.values())
        out.append(WideRecord(_id(row["id"]), events, end, cov))
    return out


def _id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def write_wide(records: Iterable[WideRecord], fh: TextIO, event_types: Sequence[str] = ("ill", "dead")) -> None:
    records = list(records)
    covs = sorted({k for r in records for k in r.covariates})
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["id", *[c for ev in event_types for c in (ev, f"{ev}_time")], *covs])
    for r in records:
        row = [r.id]
        for ev in event_types:
            if ev in r.events:
                row += [1, repr(float(r.events[ev]))]
            else:
                row += [0, repr(float(r.censor_time))]
        row += [_fmt(r.covariates.get(c, np.nan)) for c in covs]
        w.writerow(row)
