import numpy as np
import pytest

from recordbreak.records import (RecordTensor, SimulatedSeriesConfig, extract_records,
                                 simulate_series)


def small_tensor(n_sites=5, T=8, drift=0.03, seed=3, span=20.0):
    """LDM records with sites scattered in a ``span`` km square."""
    panel = simulate_series(SimulatedSeriesConfig(model="ldm", drift=drift, T=T,
                                                  replicates=n_sites, seed=seed))
    ten = extract_records(panel)
    rng = np.random.default_rng(seed + 100)
    return RecordTensor(ten.indicator, ten.tie_r, ten.sites,
                        coords=rng.uniform(0, span, (n_sites, 2)),
                        dist_coast=rng.uniform(1, 50, n_sites))


@pytest.fixture
def tensor():
    return small_tensor()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion in the terminal report

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def record_acceptance(number: int, title: str, detail: str) -> None:
    """Attach a measured summary to an acceptance criterion."""
    prev = _ACCEPTANCE.get(number, (title, "", ""))
    _ACCEPTANCE[number] = (title, prev[1], detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    prev = _ACCEPTANCE.get(number, (title, "", ""))
    _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL", prev[2])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"criterion {number:2d} {status or 'NOT RUN':4s}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
