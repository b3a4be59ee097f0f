import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import gen

    if gen.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(gen.ACCEPTANCE):
            terminalreporter.write_line(line)
