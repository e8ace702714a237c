import numpy as np
import pytest

from kangaroo.phe import PheParams, make_backend, preset
from kangaroo.protocol.selection import selection_shifts


def toy_lattice(n=256, t=65537, bits=27, count=3):
    return PheParams.lattice(n, t, bits, count, decomp_bits=14, security_level=0, name="toy")


@pytest.fixture(scope="session")
def toy_params():
    return toy_lattice()


@pytest.fixture(scope="session")
def toy(toy_params):
    be = make_backend(toy_params, seed=1)
    shifts = {1, -1, 2, -2, 4, -4, 8, -8, 3}
    return be, be.keygen(shifts, seed=2)


@pytest.fixture(scope="session")
def desk_params():
    return preset("desk-small")


@pytest.fixture(scope="session")
def desk(desk_params):
    be = make_backend(desk_params, seed=3)
    return be, be.keygen(selection_shifts(16), seed=4)


@pytest.fixture(params=["transparent", "lattice"])
def any_backend(request, toy):
    """(backend, keys) on both backends with identical slot semantics."""
    if request.param == "lattice":
        return toy
    be = make_backend(toy[0].params.with_backend("transparent"), seed=5)
    return be, be.keygen(toy[1].rotation_keys.shifts, seed=6)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
