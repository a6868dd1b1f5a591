import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, whatever the outcome."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in name and rep.when == "call":
                number = int(name.split("test_criterion_")[1].split("_")[0])
                lines.append((number, len(lines), f"criterion {number:>2}: {'PASS' if outcome == 'passed' else 'FAIL'}  {name.split('::')[1]}"))
                lines += [(number, len(lines) + i + 1, f"              {value}")
                          for i, (_, value) in enumerate(rep.user_properties)]
    if lines:
        terminalreporter.section("acceptance")
        for _, _, line in sorted(lines):
            terminalreporter.write_line(line)
