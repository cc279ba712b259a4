import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from uad.scenario import ScenarioConfig, generate_dataset

settings.register_profile("uad", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("uad")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scenes():
    """Eight default scenes; shared read-only across tests."""
    return generate_dataset(ScenarioConfig(), range(8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with whatever the test recorded."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rsplit("::", 1)[-1]
            if not name.startswith("test_criterion_") or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            number, label = name[len("test_criterion_"):].split("_", 1)
            extras = " ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            lines.append((int(number), f"criterion {int(number):2d} {label}: {'PASS' if outcome == 'passed' else 'FAIL'} {extras}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
