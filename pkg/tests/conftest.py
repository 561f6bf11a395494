import numpy as np
import pytest
from hypothesis import settings

from sublinear_sparse.core import Alphabet

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ALPHABETS = [Alphabet([1]), Alphabet([1, -1]), Alphabet([1, 2])]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance criteria report: test_acceptance.py records one line per criterion
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
