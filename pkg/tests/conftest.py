import json
from pathlib import Path

import numpy as np
import pytest

from hflkit.sieve import HflConfig

HERE = Path(__file__).parent


@pytest.fixture(scope="session")
def oracles():
    return json.loads((HERE / "oracles" / "oracles.json").read_text())


# looser stopping for noisy panels where the strict default only buys round-off
FAST = HflConfig(tol_rel=1e-7, gd_max_iters=100, sweep_max=30)


@pytest.fixture
def fast_cfg():
    return FAST


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion; returns ``ok``."""
    def _report(num: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {num:>2}  {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE[num] = line
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[num])
