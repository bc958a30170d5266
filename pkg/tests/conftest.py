import numpy as np
import pytest

from pamd.rotor import default_skeleton


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def manifold():
    from pamd.posefield import build_manifold
    return build_manifold()


@pytest.fixture(scope="session")
def trained_ndf(manifold):
    """(model, loss trace, seconds) for the default configuration; shared across test files."""
    import time
    from pamd.posefield import train_ndf
    start = time.perf_counter()
    model, trace = train_ndf(manifold)
    return model, trace, time.perf_counter() - start


GATE = pytest.StashKey[dict]()


@pytest.fixture
def gate(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(GATE, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"C{number:<2d} {'PASS' if passed else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(GATE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
