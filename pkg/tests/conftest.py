import numpy as np
import pytest
from hypothesis import settings

from quasijet import (Domain, eigenform, generate_mesh, gradient_only, isotropic, make_probe_set,
                      separable)

settings.register_profile("quasijet", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("quasijet")


@pytest.fixture(scope="session")
def disk():
    return Domain()


@pytest.fixture(scope="session")
def mesh10():
    return generate_mesh(Domain(), 0.1)


@pytest.fixture(scope="session")
def mesh05():
    return generate_mesh(Domain(), 0.05)


@pytest.fixture(scope="session")
def probes():
    return make_probe_set()


@pytest.fixture(scope="session")
def models():
    return {
        "iso": isotropic("exp(mu)*(1+0.3*eta1+0.2*eta1*eta2+eta2**2)"),
        "grad": gradient_only("1+etasq"),
        "sep": separable([["2+sin(mu)", "0"], ["0", "3"]], "1+0.5*eta1+etasq"),
        "eig": eigenform(["1+0.2*mu+0.4*eta1+eta1*eta2", "2+eta1**2+0.3*mu*eta2"], ["0.3"]),
        "rot": eigenform(["1+0.3*eta2", "2.5+0.2*mu+eta1**2"], ["0.3+0.4*mu"]),
    }


def rotation(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
