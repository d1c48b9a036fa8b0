import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pfoc.mesh import GridHierarchy
from pfoc.shapes import ShapeSpec, build_profile

settings.register_profile("pfoc", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pfoc")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def circle_spec():
    return ShapeSpec("circle", center=(2.0, 2.0), radius=1.0, eps=0.1)


@pytest.fixture(scope="session")
def ellipse_spec():
    return ShapeSpec("ellipse", center=(2.0, 2.0), radius=1.0, weights=(0.5, 1.0), eps=0.1)


@pytest.fixture(scope="session")
def bench16(circle_spec, ellipse_spec):
    """16^2 benchmark hierarchy with the initial and target profiles."""
    h = GridHierarchy.build(2, 4, 16, 16, 0.0, 4.0)
    return h, build_profile(circle_spec, h.solve), build_profile(ellipse_spec, h.solve)


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one ``criterion N: PASS|FAIL`` line, echoed now and in the terminal summary.

    ``info`` lines are supporting measurements printed below the verdict.
    """
    def record(number, ok, detail="", info=()):
        lines = [f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()]
        lines += [f"    info: {line}" for line in info]
        request.config.stash[VERDICTS].extend(lines)
        print("\n".join(lines))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
