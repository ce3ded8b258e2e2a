import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from excessms import cli
from excessms.errors import ConvergenceError
from excessms.expected import attach_expected, load_expected
from excessms.flexsurv import FlexParamSpec, SplineTerm, SurvivalData, fit_flexparam, load_model
from excessms.msm import MultiStateDataset, build_tmat_illness_death_partitioned
from excessms.simulate import SimConfig, simulate, transition_probabilities
from excessms.synthetic import SyntheticTruth, truth_models

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "pipeline.yaml"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Synthetic data, expected model, long data and the three transition fits."""
    d = tmp_path_factory.mktemp("pipeline")
    cfg = yaml.safe_load(CONFIG.read_text())

    def fix(node):
        # rewrite the relative work/ paths into the temporary directory
        if isinstance(node, dict):
            return {k: fix(v) for k, v in node.items()}
        if isinstance(node, list):
            return [fix(v) for v in node]
        if isinstance(node, str) and node.startswith("work/"):
            return str(d / node)
        return node

    cfg = fix(cfg)
    path = d / "pipeline.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["synth", "--out", str(d / "work"), "--seed", "2024"]) == 0
    assert cli.main(["fit-expected", "--config", str(path)]) == 0
    assert cli.main(["msset", "--config", str(path)]) == 0
    for name in ("excess", "death", "post_illness_death"):
        assert cli.main(["fit-transition", "--config", str(path), "--name", name]) == 0
    return d, path


def small(path, *extra):
    return ["--config", str(path), "--set", "n_point=20000", "--set", "n_ci=500", "--set", "m_reps=20", "--set", "grid_points=31", *extra]


def read_csv(p):
    with open(p) as fh:
        return list(csv.DictReader(fh))


def test_synth_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / sub), "--seed", "5", "--n", "50"]) == 0
    for f in ("cohort.csv", "popinc.csv", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header = (tmp_path / "a" / "cohort.csv").read_text().splitlines()[0]
    assert header == "id,ill,ill_time,dead,dead_time,a0,c0,female"


def test_fit_expected_rerun_is_byte_identical(work, tmp_path):
    d, path = work
    out = tmp_path / "again.json"
    assert cli.main(["fit-expected", "--config", str(path), "--set", f"out={out}"]) == 0
    assert out.read_bytes() == (d / "work" / "models" / "expected.json").read_bytes()


def test_fit_expected_missing_column_is_schema_error(tmp_path, capsys):
    bad = tmp_path / "rates.csv"
    bad.write_text("year,sex,age,d\n2000,1,50,3\n")
    code = cli.main(["fit-expected", "--set", f"rates={bad}", "--set", f"out={tmp_path / 'm.json'}"])
    assert code == 3
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "y" in err and len(err.splitlines()) == 1


def test_fitted_loglik_matches_library_call(work):
    d, path = work
    cfg = yaml.safe_load(path.read_text())["fit_transition"]
    with open(d / "work" / "long.csv") as fh:
        ds = MultiStateDataset.from_csv(fh)
    em = load_expected(d / "work" / "models" / "expected.json")
    splines = (SplineTerm("c0", 5), SplineTerm("a0", 5, True))
    sub = attach_expected(ds.for_transition(1), em)
    lib = fit_flexparam(
        SurvivalData.from_dataset(sub, "forward", "expected_rate"),
        FlexParamSpec(df=5, covariates=("female",), splines=splines, kind="excess"),
    )
    assert load_model(cfg["excess"]["out"]).loglik == lib.loglik
    lib = fit_flexparam(
        SurvivalData.from_dataset(ds.for_transition(3), "reset"),
        FlexParamSpec(df=3, covariates=("female",), splines=splines, clock="reset"),
    )
    post = load_model(cfg["post_illness_death"]["out"])
    assert post.loglik == lib.loglik
    # onward model: three degrees of freedom on the clock-reset scale
    assert post.spec.clock == "reset" and post.baseline.df == 3


def test_excess_without_expected_model_is_config_error(work, capsys):
    d, path = work
    code = cli.main(["fit-transition", "--config", str(path), "--name", "excess", "--set", "expected_model=null"])
    assert code == 2
    assert "expected_model" in capsys.readouterr().err


def test_convergence_failure_exit_code(work, monkeypatch):
    d, path = work

    def fail(*a, **k):
        raise ConvergenceError("did not converge")

    monkeypatch.setattr(cli, "fit_flexparam", fail)
    assert cli.main(["fit-transition", "--config", str(path), "--name", "death", "--set", f"out={d / 'x.json'}"]) == 4


@pytest.mark.parametrize(
    "override, code, match",
    [
        ("horizon=10", 2, "horizon"),
        ("models.extra=foo.json", 2, "slots"),
        ("proportion_mode=null", 2, "proportion_mode"),
        ("bogus=1", 2, "unknown setting"),
        ("at2=null", 2, "at2"),
        ("method=euler", 2, "method"),
    ],
)
def test_predict_config_errors(work, tmp_path, capsys, override, code, match):
    d, path = work
    # horizon=10 with a 0-15 grid leaves grid points outside the horizon
    extra = ["--set", override, "--set", f"out_dir={tmp_path}"]
    if override == "horizon=10":
        extra += ["--set", "time_grid=[0, 5, 15]"]
    assert cli.main(["predict", "--seed", "1", *small(path, *extra)]) == code
    assert match in capsys.readouterr().err


def test_predict_requires_seed(work):
    d, path = work
    with pytest.raises(SystemExit) as e:
        cli.main(["predict", "--config", str(path)])
    assert e.value.code == 2


def test_predict_outputs_and_determinism(work, tmp_path):
    d, path = work
    runs = []
    for sub, threads in (("a", "1"), ("b", "3")):
        out = tmp_path / sub
        assert cli.main(["predict", "--seed", "7", "--threads", threads, *small(path, "--set", f"out_dir={out}")]) == 0
        runs.append(out)
    names = sorted(p.name for p in runs[0].iterdir())
    assert names == sorted(
        [f"{q}_{a}.csv" for q in ("probability", "los", "ever_visit", "proportion_excess") for a in ("at1", "at2")]
        + ["difference.csv", "summary.json"]
    )
    for n in names:
        assert (runs[0] / n).read_bytes() == (runs[1] / n).read_bytes()
    rows = read_csv(runs[0] / "probability_at1.csv")
    assert list(rows[0]) == ["time", "state", "estimate", "lower", "upper"]
    est = np.array([float(r["estimate"]) for r in rows]).reshape(5, 31)
    np.testing.assert_allclose(est.sum(axis=0), 1.0, atol=1e-12)
    diff = np.array([float(r["estimate"]) for r in read_csv(runs[0] / "difference.csv")]).reshape(5, 31)
    np.testing.assert_allclose(diff.sum(axis=0), 0.0, atol=1e-12)
    summary = json.loads((runs[0] / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["counters"]["proportion_excess/at1"]["mode"] == "ever_visited"
    # a different seed changes the Monte Carlo output
    out = tmp_path / "c"
    assert cli.main(["predict", "--seed", "8", *small(path, "--set", f"out_dir={out}")]) == 0
    assert (out / "probability_at1.csv").read_bytes() != (runs[0] / "probability_at1.csv").read_bytes()


def test_sweep_writes_eighteen_files(work, tmp_path):
    d, path = work
    out = tmp_path / "sweep"
    assert cli.main(["predict", "--seed", "3", *small(path, "--set", "mode=sweep", "--set", f"out_dir={out}")]) == 0
    files = sorted(out.iterdir())
    assert len(files) == 18
    assert {f.name for f in files} == {
        f"probability_excess{a}_death{b}_post{c}.csv" for a in (3, 4, 5) for b in (3, 4, 5) for c in (3, 4)
    }


def test_pipeline_close_to_truth(work, tmp_path):
    # 4,000 patients: fitted predictions should land near the generating model
    d, path = work
    out = tmp_path / "p"
    grid = "time_grid=[5.0, 10.0, 15.0]"
    assert cli.main(["predict", "--seed", "9", *small(path, "--set", f"out_dir={out}", "--set", grid, "--set", "ci=false", "--set", "n_point=200000")]) == 0
    est = np.array([float(r["estimate"]) for r in read_csv(out / "probability_at1.csv")]).reshape(5, 3)
    at = {"female": 0.0, "c0": 1995.0, "a0": 30.0}
    s = simulate(truth_models(SyntheticTruth()), build_tmat_illness_death_partitioned(), at, SimConfig(n_point=200_000, seed=9, threads=1))
    true = transition_probabilities(s, [5.0, 10.0, 15.0]).estimate
    assert np.abs(est - true).max() < 0.05


def test_pipeline_script_and_config_exist():
    script = (ROOT / "scripts" / "pipeline.sh").read_text()
    for step in ("synth", "fit-expected", "msset", "fit-transition", "predict"):
        assert f"excessms {step}" in script
    assert shutil.which("sh") is not None
