import sys
from pathlib import Path

import pytest

SCRIPTS = Path(__file__).resolve().parents[1] / "scripts"


@pytest.fixture(scope="session")
def calibrate():
    """The reference-fit oracle script, imported as a module."""
    sys.path.insert(0, str(SCRIPTS))
    try:
        import calibrate_reference
    finally:
        sys.path.remove(str(SCRIPTS))
    return calibrate_reference


@pytest.fixture(scope="session")
def reference_runs(calibrate):
    """Full reference fit plus the single-term ablations, computed once per session."""
    cache = {}

    def get(name: str) -> dict:
        if name not in cache:
            cache[name] = calibrate.measure(calibrate.ABLATIONS[name])
        return cache[name]

    return get


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(results):
            terminalreporter.write_line(results[criterion])
