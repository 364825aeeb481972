import math

import pytest
from hypothesis import HealthCheck, settings

from qlspec.crystal import CrystalSpec, mode_structure
from qlspec.dynamics import NoiseModel, build_engine
from qlspec.molecule import MASSES_AMU, MGH_PLUS, CombDrive, ThermalEnvironment
from qlspec.protocols import LineBook, ProtocolConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FROZEN = ThermalEnvironment(rethermalization_time=math.inf)


@pytest.fixture(scope="session")
def spec():
    return CrystalSpec.from_amu(MASSES_AMU["Mg+"], MASSES_AMU["MgH+"], 1.0e6)


@pytest.fixture(scope="session")
def drive():
    return CombDrive()


@pytest.fixture(scope="session")
def modes(spec, drive):
    return mode_structure(spec, drive.k_effective)


@pytest.fixture(scope="session")
def env():
    return ThermalEnvironment()


@pytest.fixture(scope="session")
def book(modes, drive, env):
    return LineBook(MGH_PLUS, drive, modes, env=env)


@pytest.fixture(scope="session")
def frozen_book(modes, drive):
    return LineBook(MGH_PLUS, drive, modes, env=FROZEN)


@pytest.fixture(scope="session")
def make_engine(modes, drive, env):
    """Engine factory with the MgH+ preset; keyword arguments go to build_engine."""
    def factory(**kw):
        kw.setdefault("noise", NoiseModel.ideal())
        kw.setdefault("log", False)
        environment = kw.pop("env", env)
        model = kw.pop("model", MGH_PLUS)
        return build_engine(modes, model, environment, drive, **kw)
    return factory


@pytest.fixture(scope="session")
def config():
    return ProtocolConfig()


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, ok, detail)``."""
    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
