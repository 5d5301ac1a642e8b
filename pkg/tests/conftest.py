"""Shared fixtures and hypothesis strategies."""

import numpy as np
import pytest
from hypothesis import strategies as st

from adaptfv.euler import prim_to_cons

GAMMA = 1.4


def physical_prim(dim: int):
    """Strategy for one primitive state (rho, v..., p) well away from vacuum."""
    return st.tuples(
        st.floats(0.05, 10.0),
        st.lists(st.floats(-3.0, 3.0), min_size=dim, max_size=dim),
        st.floats(0.05, 10.0),
    ).map(lambda t: np.array([t[0], *t[1], t[2]]))


def physical_cons(dim: int):
    return physical_prim(dim).map(lambda W: prim_to_cons(W, GAMMA))


def random_prim(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """``n`` random physical primitive states, shape ``(dim + 2, n)``."""
    rho = rng.uniform(0.05, 10.0, n)
    v = rng.uniform(-3.0, 3.0, (dim, n))
    p = rng.uniform(0.05, 10.0, n)
    return np.vstack([rho, v, p])


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# criterion number -> (passed, description, measured values); filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {text}")
        for line in detail:
            terminalreporter.write_line(f"              {line}")
