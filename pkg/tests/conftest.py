import pytest

from collidernet import images


@pytest.fixture(scope="session")
def pool():
    return images.build_pool(2609, seed=101)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs the cached full-scale acceptance run")


def pytest_terminal_summary(terminalreporter):
    import sys

    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(mod, "LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.LINES:
                terminalreporter.write_line(line)
