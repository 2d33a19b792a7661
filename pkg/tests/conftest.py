import zlib

import numpy as np
import pytest


@pytest.fixture
def rng(request):
    # one stream per test id so adding tests never shifts another test's data
    return np.random.default_rng(zlib.crc32(request.node.nodeid.encode()))


@pytest.fixture(scope="session")
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
