import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; returns ``ok``."""
    def report(num, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {num:>2}. {title}: {detail}"
        request.config.stash[_RESULTS].append((num, line))
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_RESULTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
