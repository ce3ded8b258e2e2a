import numpy as np
import pytest

from excessms.expected import RateTable


def make_table(log_rate, years, ages, sexes=(1, 2), y=None, rng=None, exact=False):
    """Rate table with ``d ~ Poisson(y * exp(log_rate(year, sex, age)))``."""
    Y, S, A = np.meshgrid(np.asarray(years), np.asarray(sexes), np.asarray(ages), indexing="ij")
    Y, S, A = Y.ravel(), S.ravel(), A.ravel()
    rng = rng or np.random.default_rng(0)
    py = np.full(Y.shape, 1e5) if y is None else np.broadcast_to(y, Y.shape).astype(float)
    mu = py * np.exp(log_rate(Y.astype(float), S, A.astype(float)))
    d = np.round(mu) if exact else rng.poisson(mu).astype(float)
    return RateTable(Y.astype(np.int64), S.astype(np.int64), A.astype(np.int64), d, py)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_criteria: dict[int, list[tuple[str, bool, float]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    detail = "; ".join(v for k, v in rep.user_properties if k == "detail")
    name = f"{item.name} [{detail}]" if detail else item.name
    _criteria.setdefault(marker.args[0], []).append((name, rep.when == "call" and rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        runs = _criteria[k]
        ok = all(passed for _, passed, _ in runs)
        names = ", ".join(name for name, _, _ in runs)
        seconds = sum(d for _, _, d in runs)
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {seconds:7.1f} s  {names}")
