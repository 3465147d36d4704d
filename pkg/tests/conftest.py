import numpy as np
import pytest

from expertfold.runtime import ToySpec, gen_toy


@pytest.fixture(scope="session")
def toy():
    return gen_toy(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_toy():
    return gen_toy(3, ToySpec(d_model=6, d_ff=8, n_layers=2, n_experts=4, n_tokens=64))


SUITE_BUDGET_S = 120.0
_session = {}


def pytest_sessionstart(session):
    import time

    _session["start"] = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    import time

    elapsed = time.perf_counter() - _session.get("start", time.perf_counter())
    tr = session.config.pluginmanager.get_plugin("terminalreporter")
    ok = elapsed < SUITE_BUDGET_S
    if tr is not None:
        tr.write_line(f"{'PASS' if ok else 'FAIL'} suite runtime: {elapsed:.1f}s (budget {SUITE_BUDGET_S:.0f}s)")
    if not ok and exitstatus == 0:
        session.exitstatus = 1


def suite_elapsed():
    import time

    return time.perf_counter() - _session.get("start", time.perf_counter())
