import numpy as np
import pytest

from metaseg import dataset as D


@pytest.fixture(scope="session")
def small_sources():
    """Three tiny synthetic sources with different class counts (16x16)."""
    return [
        D.generate_synthetic_source(100 + i, k, 12, 16, 16, source_id=f"src{k}")
        for i, k in enumerate((2, 3, 4))
    ]


@pytest.fixture(scope="session")
def small_meta(small_sources):
    return D.build_meta_dataset(small_sources, (0.5, 0.5), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, title, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
