import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """``criterion(name, passed, detail)`` records one pass/fail line for the terminal summary."""
    lines = request.config.stash[_RESULTS]

    def record(name, passed, detail=""):
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
