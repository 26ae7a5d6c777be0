import numpy as np
import pytest
import torch

from gaitlwm.numcore import RngStream
from gaitlwm.synthgait import control_cohort, generate_corpus, impaired_cohort

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    specs = [
        control_cohort(subjects=3, duration_s=20, fall_rate=1.0),
        impaired_cohort(subjects=3, duration_s=20, fall_rate=1.0),
    ]
    return generate_corpus(specs, RngStream(5))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
