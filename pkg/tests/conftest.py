import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dialrank.synth import DatasetConfig, generate  # noqa: E402
from dialrank.tensor import clear_tape  # noqa: E402


@pytest.fixture(autouse=True)
def _fresh_tape():
    clear_tape()
    yield
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return generate(DatasetConfig(n_examples=24, seed=5, split_ratios={"train": 0.5, "val": 0.5}))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Tiny dims for gradient checks: k=3 objects, 2 rounds, 5 candidates."""
    return generate(DatasetConfig(n_examples=4, rounds=2, candidates=5, objects=3, d_v=6, n_categories=4,
                                  n_colors=3, history_fraction=0.25, seed=2,
                                  split_ratios={"train": 0.5, "val": 0.5}))


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    lines = request.config.stash[_VERDICTS]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
