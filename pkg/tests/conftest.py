import pytest

from vqlab import kernels

BACKENDS = sorted(kernels.BACKENDS)

ACCEPTANCE_LINES = []


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
