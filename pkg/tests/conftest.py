import warnings

import numpy as np
import pytest

from hawkes_mca.lattice import assemble_transitions, build_lattice
from hawkes_mca.presets import OUCyberParams, lambda_to_sigma, ou_cyber
from hawkes_mca.solver import backward_solve


@pytest.fixture(autouse=True)
def _quiet_critical():
    # the preset kernel is critical on purpose; keep its warning out of the logs
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*critical.*", category=RuntimeWarning)
        yield


@pytest.fixture(scope="session")
def ou_preset():
    p = OUCyberParams()
    model, cost = ou_cyber(p)
    return p, model, cost


_SOLVED = {}


def solved(h, phi="default", keep="all"):
    """Session cache of solved preset problems keyed by (h, phi, keep)."""
    key = (h, phi, keep)
    if key not in _SOLVED:
        p = OUCyberParams() if phi == "default" else OUCyberParams(phi=phi)
        model, cost = ou_cyber(p)
        lat = build_lattice(model, h, M=21, n_marks=8)
        tm = assemble_transitions(model, cost, lat)
        table, pol = backward_solve(model, cost, lat, tm, keep=keep)
        _SOLVED[key] = (p, model, cost, lat, tm, table, pol)
    return _SOLVED[key]


def sig(lam0, p=None):
    return np.array([lambda_to_sigma(lam0, p or OUCyberParams())])


# acceptance results, filled by test_acceptance and printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
