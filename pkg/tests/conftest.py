from pathlib import Path

import pytest

from mvgame.game import solve_leader
from mvgame.model import load_problem, toy_spec

ROOT = Path(__file__).resolve().parent.parent
PROBLEMS = ROOT / "problems"


@pytest.fixture(scope="session")
def problems_dir():
    return PROBLEMS


@pytest.fixture(scope="session")
def toy():
    return toy_spec()


@pytest.fixture(scope="session")
def toy_file_spec():
    return load_problem(PROBLEMS / "toy_1d.json")


@pytest.fixture(scope="session")
def toy_eq(toy):
    return solve_leader(toy)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one summary line per acceptance criterion."""
    def record(label: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
