import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lidar_fdii.scenario import bundled, load_scenario, run_fdii, simulate

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@functools.lru_cache(maxsize=None)
def bundled_run(name: str):
    """Simulate + perceive + classify one bundled scenario (cached per session)."""
    sc = load_scenario(bundled(name))
    sim = simulate(sc)
    return sc, sim, run_fdii(sc, sim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: list[str] = []


def record_criterion(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    _CRITERIA.append(line)
    print("\n" + line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
