"""Command line tool.

Each subcommand reads one section of a YAML run configuration
(``fit_expected``, ``msset``, ``fit_transition``, ``predict``); a file
without that key is taken to be the section itself. ``--set key=value``
overrides single entries (dotted keys reach into nested mappings, values
are parsed as YAML). Relative paths are resolved against the working
directory.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 input schema error, 4 convergence failure.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import expected as expmod
from . import flexsurv as fsmod
from .errors import ConfigError, ExcessMSError
from .expected import ExpectedRateModel, attach_expected, fit_expected, load_rate_table
from .flexsurv import FittedTransitionModel, FlexParamSpec, SplineTerm, SurvivalData, fit_flexparam
from .msm import MultiStateDataset, build_tmat_illness_death_partitioned, load_wide, msset
from .simulate import Quantity, SimConfig, predict_set
from .splines import KnotVector, SplineSpec
from .synthetic import SyntheticTruth, draw_cohort, make_rate_table, write_cohort_days

SLOTS = ("expected", "excess", "death", "post_illness_death")
OUTPUTS = ("probability", "difference", "proportion_excess", "los", "ever_visit")


# ---------------------------------------------------------------- config handling


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {key}: {e}") from None
    return key.strip().split("."), parsed


def load_section(path: str | None, section: str, overrides: Sequence[str] = (), name: str | None = None) -> dict:
    """The settings for one subcommand, with overrides applied."""
    cfg: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = doc.get(section, doc)
        if name is not None:
            if name not in cfg:
                raise ConfigError(f"{path}: no {section} entry named {name!r}")
            cfg = cfg[name]
        cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, value = _parse_override(text)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a mapping")
        node[keys[-1]] = value
    return cfg


def _check_keys(cfg: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown setting(s) {', '.join(unknown)}")


def _require(cfg: Mapping, key: str, where: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{where}: missing required setting {key!r}")
    return cfg[key]


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _int(v, what: str, low: int = 1) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < low:
        raise ConfigError(f"{what} must be an integer >= {low}, got {v!r}")
    return int(v)


# ---------------------------------------------------------------- model files


def load_any_model(path) -> ExpectedRateModel | FittedTransitionModel:
    with open(_existing(path, "model file")) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not a model file ({e})") from None
    schema = d.get("schema") if isinstance(d, dict) else None
    if schema == expmod.SCHEMA:
        return expmod.from_dict(d)
    if schema == fsmod.SCHEMA:
        return fsmod.from_dict(d)
    raise ConfigError(f"{path}: unknown model schema {schema!r}")


def _coef_table(names, est, vcov) -> str:
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    w = max(len(n) for n in names)
    lines = [f"{'term':<{w}}  {'coef':>12}  {'se':>10}"]
    lines += [f"{n:<{w}}  {b:12.6f}  {s:10.6f}" for n, b, s in zip(names, est, se)]
    return "\n".join(lines)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = SyntheticTruth(n_patients=args.n)
    rng = np.random.default_rng(args.seed)
    table = make_rate_table(truth, rng)
    cohort = draw_cohort(truth, rng)
    with open(out / "popinc.csv", "w") as fh:
        table.to_csv(fh)
    with open(out / "cohort.csv", "w") as fh:
        write_cohort_days(cohort, fh)
    with open(out / "truth.json", "w") as fh:
        json.dump(dict(truth.to_dict(), seed=args.seed), fh, indent=2)
        fh.write("\n")
    n_ill = sum("ill" in r.events for r in cohort)
    n_dead = sum("dead" in r.events for r in cohort)
    print(f"{len(cohort)} patients ({n_ill} ill, {n_dead} dead), {len(table)} rate-table cells -> {out}")
    return 0


# ---------------------------------------------------------------- fit-expected

FIT_EXPECTED_KEYS = {"rates", "out", "df_age", "df_year", "age_knots", "year_knots", "log_age", "covariates", "orthogonalize"}


def cmd_fit_expected(args) -> int:
    cfg = load_section(args.config, "fit_expected", args.set)
    where = "fit_expected"
    _check_keys(cfg, FIT_EXPECTED_KEYS, where)
    with open(_existing(_require(cfg, "rates", where), "rate table")) as fh:
        table = load_rate_table(fh)
    log_age = bool(cfg.get("log_age", True))
    ortho = bool(cfg.get("orthogonalize", False))
    df_age, df_year = _int(cfg.get("df_age", 5), "df_age"), _int(cfg.get("df_year", 5), "df_year")
    age_spec, year_spec = expmod.default_specs(table, df_age, df_year, log_age)
    if cfg.get("age_knots") is not None:
        age_spec = SplineSpec(KnotVector(tuple(cfg["age_knots"]), log_age))
    if cfg.get("year_knots") is not None:
        year_spec = SplineSpec(KnotVector(tuple(cfg["year_knots"])))
    if ortho:
        age_spec = SplineSpec(age_spec.knot_vector, True)
        year_spec = SplineSpec(year_spec.knot_vector, True)
    model = fit_expected(table, age_spec, year_spec, [str(c) for c in cfg.get("covariates", [])])
    expmod.save_expected(model, _out(_require(cfg, "out", where)))
    names = (
        ["_cons"]
        + [f"rcs_age{j + 1}" for j in range(model.age_spec.df)]
        + [f"rcs_year{j + 1}" for j in range(model.year_spec.df)]
        + model.covariate_names
    )
    print(f"deviance {model.deviance:.4f} on {len(table)} cells, log-likelihood {model.loglik:.4f}")
    print(f"age knots ({'log ' if log_age else ''}scale): {' '.join(f'{k:.4f}' for k in model.age_spec.knot_vector.knots)}")
    print(f"year knots: {' '.join(f'{k:g}' for k in model.year_spec.knot_vector.knots)}")
    print(_coef_table(names, model.beta, model.vcov))
    return 0


# ---------------------------------------------------------------- msset

MSSET_KEYS = {"input", "out", "time_scale", "reset_after_illness"}


def cmd_msset(args) -> int:
    cfg = load_section(args.config, "msset", args.set)
    where = "msset"
    _check_keys(cfg, MSSET_KEYS, where)
    scale = float(cfg.get("time_scale", 1.0))
    if not scale > 0:
        raise ConfigError("time_scale must be positive")
    with open(_existing(_require(cfg, "input", where), "wide-format data")) as fh:
        records = load_wide(fh, scale=scale)
    tmat = build_tmat_illness_death_partitioned(bool(cfg.get("reset_after_illness", True)))
    ds = msset(records, tmat)
    with open(_out(_require(cfg, "out", where)), "w") as fh:
        ds.to_csv(fh)
    counts = {int(k): int(ds.status[ds.trans == k].sum()) for k in np.unique(ds.trans)}
    print(f"{len(records)} patients -> {len(ds)} rows; events by transition: {counts}")
    return 0


# ---------------------------------------------------------------- fit-transition

FIT_KEYS = {
    "data", "out", "transition", "kind", "clock", "df", "knots", "covariates", "splines",
    "expected_model", "expected_mapping", "orthogonalize",
}


def _spline_term(item) -> SplineTerm:
    if isinstance(item, str):
        return SplineTerm.parse(item)
    if not isinstance(item, Mapping) or "name" not in item:
        raise ConfigError(f"spline term must be 'name:df[:log]' or a mapping with 'name', got {item!r}")
    _check_keys(item, {"name", "df", "knots", "log"}, f"spline term {item['name']!r}")
    log = bool(item.get("log", False))
    knots = item.get("knots")
    if knots is not None:
        kv = KnotVector(tuple(float(k) for k in knots), log)
        return SplineTerm(item["name"], kv.df, log, kv)
    return SplineTerm(item["name"], _int(item.get("df", 3), "spline df"), log)


def transition_spec(cfg: Mapping) -> FlexParamSpec:
    knots = cfg.get("knots")
    return FlexParamSpec(
        df=_int(cfg.get("df", 3), "df") if knots is None else len(knots) - 1,
        knots=None if knots is None else KnotVector(tuple(float(k) for k in knots), True),
        covariates=tuple(cfg.get("covariates", ())),
        splines=tuple(_spline_term(s) for s in cfg.get("splines", ())),
        kind=cfg.get("kind", "all_cause"),
        clock=cfg.get("clock", "forward"),
        orthogonalize=bool(cfg.get("orthogonalize", False)),
    )


def transition_data(cfg: Mapping, dataset: MultiStateDataset | None = None) -> tuple[SurvivalData, FlexParamSpec]:
    """Survival data for one transition of a long-format file, with expected rates when needed."""
    where = "fit_transition"
    _check_keys(cfg, FIT_KEYS, where)
    spec = transition_spec(cfg)
    trans = _int(_require(cfg, "transition", where), "transition")
    if dataset is None:
        with open(_existing(_require(cfg, "data", where), "long-format data")) as fh:
            dataset = MultiStateDataset.from_csv(fh)
    if trans not in set(dataset.trans.tolist()):
        raise ConfigError(f"transition {trans} has no rows in the data")
    sub = dataset.for_transition(trans)
    rate_col = None
    if spec.kind == "excess":
        if cfg.get("expected_model") is None:
            raise ConfigError("kind 'excess' needs expected_model (path to a fitted expected-rate model)")
        em = load_any_model(cfg["expected_model"])
        if not isinstance(em, ExpectedRateModel):
            raise ConfigError(f"{cfg['expected_model']}: not an expected-rate model")
        sub = attach_expected(sub, em, cfg.get("expected_mapping"))
        rate_col = "expected_rate"
    return SurvivalData.from_dataset(sub, spec.clock, rate_col), spec


def cmd_fit_transition(args) -> int:
    cfg = load_section(args.config, "fit_transition", args.set, args.name)
    data, spec = transition_data(cfg)
    model = fit_flexparam(data, spec)
    fsmod.save_model(model, _out(_require(cfg, "out", "fit_transition")))
    print(
        f"transition {cfg['transition']} ({spec.kind}, {spec.clock} clock): {int(data.status.sum())} events in "
        f"{len(data)} rows, log-likelihood {model.loglik:.6f}, {model.iterations} iterations"
    )
    print(f"baseline knots (log time): {' '.join(f'{k:.4f}' for k in model.baseline_knots.knots)}")
    print(_coef_table(model.parameter_names, model.parameters, model.vcov))
    return 0


# ---------------------------------------------------------------- predict

PREDICT_KEYS = {
    "models", "mode", "reset_after_illness", "horizon", "grid_points", "time_grid", "n_point", "n_ci", "m_reps",
    "ci", "ci_level", "method", "at1", "at2", "outputs", "proportion_mode", "merged", "out_dir", "sweep",
}
SWEEP_KEYS = {"data", "fits", "dfs", "quantity"}


def _sim_config(cfg: Mapping, seed: int, threads) -> SimConfig:
    horizon = float(cfg.get("horizon", 15.0))
    grid = cfg.get("time_grid")
    if grid is None:
        grid = np.linspace(0.0, horizon, _int(cfg.get("grid_points", 1000), "grid_points", 2))
    return SimConfig(
        n_point=_int(cfg.get("n_point", 1_000_000), "n_point"),
        n_ci=_int(cfg.get("n_ci", 10_000), "n_ci"),
        m_reps=_int(cfg.get("m_reps", 1000), "m_reps"),
        horizon=horizon,
        time_grid=tuple(float(t) for t in grid),
        seed=seed,
        method=cfg.get("method", "latent"),
        ci_level=float(cfg.get("ci_level", 0.95)),
        threads=threads,
    )


def _pattern(cfg: Mapping, key: str) -> dict[str, float]:
    at = cfg.get(key)
    if not isinstance(at, Mapping) or not at:
        raise ConfigError(f"predict: {key} must be a mapping of covariate values")
    try:
        return {str(k): float(v) for k, v in at.items()}
    except (TypeError, ValueError):
        raise ConfigError(f"predict: {key} values must be numbers") from None


def _check_pattern(models: Mapping, at: Mapping[str, float], key: str) -> None:
    need = set()
    for m in models.values():
        if isinstance(m, FittedTransitionModel):
            need.update(m.design.required)
        elif isinstance(m, ExpectedRateModel):
            need.update({"a0", "c0"})
            for c in m.covariates:
                if c.name not in at and c.source not in at:
                    need.add(c.name)
    missing = sorted(need - set(at))
    if missing:
        raise ConfigError(f"predict: {key} lacks {', '.join(missing)}")


def _load_models(cfg: Mapping) -> dict:
    paths = _require(cfg, "models", "predict")
    if not isinstance(paths, Mapping):
        raise ConfigError("predict: models must map slot names to model files")
    unknown = sorted(set(paths) - set(SLOTS))
    missing = sorted(set(SLOTS) - set(paths))
    if unknown or missing:
        raise ConfigError(
            f"predict: model slots must be exactly {', '.join(SLOTS)}"
            + (f"; unknown {', '.join(unknown)}" if unknown else "")
            + (f"; missing {', '.join(missing)}" if missing else "")
        )
    return {slot: load_any_model(p) for slot, p in paths.items()}


def _write(result, path: Path) -> None:
    with open(_out(path), "w") as fh:
        result.to_csv(fh)


def _outputs(cfg: Mapping, has_at2: bool):
    outputs = cfg.get("outputs", ["probability"])
    bad = [o for o in outputs if o not in OUTPUTS]
    if bad:
        raise ConfigError(f"predict: unknown output(s) {', '.join(bad)}; choose from {', '.join(OUTPUTS)}")
    if "difference" in outputs and not has_at2:
        raise ConfigError("predict: the difference output needs at2")
    merged = bool(cfg.get("merged", False))
    quantities = {}
    for o in outputs:
        if o == "proportion_excess":
            mode = cfg.get("proportion_mode")
            if mode not in ("current_state", "ever_visited"):
                raise ConfigError("predict: proportion_excess needs proportion_mode: current_state or ever_visited")
            quantities[o] = Quantity(o, mode=mode)
        elif o != "difference":
            quantities[o] = Quantity(o, merge=merged)
    if "difference" in outputs:
        quantities.setdefault("probability", Quantity("probability", merge=merged))
    contrasts = [("difference", "probability", "at1", "at2")] if "difference" in outputs else []
    return outputs, quantities, contrasts


def cmd_predict(args) -> int:
    cfg = load_section(args.config, "predict", args.set)
    _check_keys(cfg, PREDICT_KEYS, "predict")
    mode = cfg.get("mode", "single")
    if mode not in ("single", "sweep"):
        raise ConfigError(f"predict: mode must be single or sweep, got {mode!r}")
    sim = _sim_config(cfg, args.seed, args.threads)
    tmat = build_tmat_illness_death_partitioned(bool(cfg.get("reset_after_illness", True)))
    out_dir = Path(_require(cfg, "out_dir", "predict"))
    models = _load_models(cfg)
    patterns = {"at1": _pattern(cfg, "at1")}
    if cfg.get("at2") is not None:
        patterns["at2"] = _pattern(cfg, "at2")
    for key, at in patterns.items():
        _check_pattern(models, at, key)
    if mode == "sweep":
        return _sweep(cfg, models, tmat, patterns, sim, out_dir)

    outputs, quantities, contrasts = _outputs(cfg, "at2" in patterns)
    results = predict_set(models, tmat, patterns, sim, quantities, contrasts, ci=bool(cfg.get("ci", True)))
    written = []
    for key, res in sorted(results.items()):
        q, pat = key.split("/")
        if q == "probability" and "probability" not in outputs:
            continue
        name = "difference" if q == "probability_difference" else f"{q}_{pat}"
        _write(res, out_dir / f"{name}.csv")
        written.append(name)
    summary = {
        "seed": args.seed,
        "n_point": sim.n_point,
        "n_ci": sim.n_ci,
        "m_reps": sim.m_reps,
        "ci": bool(cfg.get("ci", True)),
        "method": sim.method,
        "patterns": patterns,
        "counters": {k: _jsonable(v.counters) for k, v in sorted(results.items())},
    }
    with open(_out(out_dir / "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"wrote {', '.join(f'{w}.csv' for w in written)} to {out_dir}")
    return 0


def _jsonable(d: Mapping) -> dict:
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in d.items()}


def _sweep(cfg, models, tmat, patterns, sim, out_dir: Path) -> int:
    sw = _require(cfg, "sweep", "predict")
    _check_keys(sw, SWEEP_KEYS, "predict.sweep")
    fits = _require(sw, "fits", "predict.sweep")
    dfs = _require(sw, "dfs", "predict.sweep")
    slots = ("excess", "death", "post_illness_death")
    for key, what in ((fits, "fits"), (dfs, "dfs")):
        if not isinstance(key, Mapping) or sorted(key) != sorted(slots):
            raise ConfigError(f"predict.sweep.{what} must have entries for {', '.join(slots)}")
    quantity = Quantity(sw.get("quantity", "probability"), merge=bool(cfg.get("merged", False)))
    dataset = None
    if sw.get("data") is not None:
        with open(_existing(sw["data"], "long-format data")) as fh:
            dataset = MultiStateDataset.from_csv(fh)
    # one fit per (slot, df); combinations reuse them
    fitted = {}
    for slot in slots:
        for df in dfs[slot]:
            fc = dict(fits[slot], df=_int(df, f"sweep df for {slot}"))
            fc.pop("knots", None)
            fc.pop("out", None)
            data, spec = transition_data(fc, dataset)
            fitted[slot, int(df)] = fit_flexparam(data, spec)
    combos = list(itertools.product(*(dfs[s] for s in slots)))
    for combo in combos:
        ms = dict(models)
        ms.update({s: fitted[s, int(d)] for s, d in zip(slots, combo)})
        res = predict_set(ms, tmat, {"at1": patterns["at1"]}, sim, {"q": quantity}, ci=False)["q/at1"]
        _write(res, out_dir / f"{quantity.kind}_excess{combo[0]}_death{combo[1]}_post{combo[2]}.csv")
    print(f"wrote {len(combos)} df-sweep files to {out_dir}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="excessms",
        description="Multi-state models with an expected/excess partitioned illness state.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry (repeatable)")
        return sp

    s = sub.add_parser("synth", help="write the synthetic cohort, population table and true parameters")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=2024)
    s.add_argument("--n", type=int, default=4000, help="number of patients")
    s.set_defaults(func=cmd_synth)

    s = with_config(sub.add_parser("fit-expected", help="fit the Poisson model for population rates"))
    s.set_defaults(func=cmd_fit_expected)

    s = with_config(sub.add_parser("msset", help="reshape wide patient data to one row per transition at risk"))
    s.set_defaults(func=cmd_msset)

    s = with_config(sub.add_parser("fit-transition", help="fit a flexible parametric transition model"))
    s.add_argument("--name", help="entry of the fit_transition section to run")
    s.set_defaults(func=cmd_fit_transition)

    s = with_config(sub.add_parser("predict", help="simulate and write prediction CSVs"))
    s.add_argument("--seed", type=int, required=True, help="random seed (required)")
    s.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return ConfigError.exit_code
    if getattr(args, "seed", 0) < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return args.func(args)
    except ExcessMSError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        # bad paths, knots or values that slipped past config validation
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
