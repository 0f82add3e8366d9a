import numpy as np
import pytest

from versreid.data import generate_dataset

ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """6 identities, 6 images per identity per scene (1 query, 2 gallery, 3 train)."""
    m = generate_dataset(tmp_path_factory.mktemp("small"), 6, 6, seed=11)
    m.preload()
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line; returns the verdict so tests can assert on it."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
