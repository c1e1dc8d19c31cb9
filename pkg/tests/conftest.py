import math
import time

import numpy as np
import pytest

from nleq import chansim, ldpc

HAMMING_ALIST = """7 3
3 4
1 1 2 1 2 2 3
4 4 4
1 0 0
2 0 0
1 2 0
3 0 0
1 3 0
2 3 0
1 2 3
1 3 5 7
2 3 6 7
4 5 6 7
"""


@pytest.fixture(scope="session")
def hamming():
    return ldpc.load_alist(HAMMING_ALIST)


@pytest.fixture(scope="session")
def desk_code():
    return ldpc.default_code()


@pytest.fixture(scope="session")
def toy_code():
    # 63 bits = 21 PAM-8 symbols on one stream
    return ldpc.make_ira_code(63, 51, col_weight=3, seed=1)


@pytest.fixture
def linear_cfg():
    return chansim.ChannelConfig(nl_amplitude=math.inf)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Acceptance report: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

_VERDICTS: dict[int, str] = {}


class Criterion:
    """Times a criterion and records its verdict line.

    ``budget_s`` is the runtime bound; exceeding it fails the criterion.
    ``setup_s`` adds time spent outside the block (shared fixtures).
    """

    def __init__(self, number: int, title: str, budget_s: float, setup_s: float = 0.0):
        self.number, self.title, self.budget_s, self.setup_s = number, title, budget_s, setup_s
        self.ok, self.detail, self.line = False, "no verdict", ""

    def __enter__(self):
        self._t0 = time.perf_counter()
        return self

    def check(self, ok: bool, detail: str):
        self.ok, self.detail = bool(ok), detail

    @property
    def passed(self) -> bool:
        return self.ok and self.elapsed_s <= self.budget_s

    def __exit__(self, exc_type, exc, tb):
        self.elapsed_s = time.perf_counter() - self._t0 + self.setup_s
        if exc_type is not None:
            self.ok, self.detail = False, f"{exc_type.__name__}: {exc}"
        tag = "PASS" if self.passed else "FAIL"
        self.line = (f"criterion {self.number:2d} {tag}  {self.title}: {self.detail} "
                     f"[{self.elapsed_s:.1f} s, budget {self.budget_s:g} s]")
        _VERDICTS[self.number] = self.line
        print(self.line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
