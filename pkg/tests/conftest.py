import pytest

from qpdmm import rng
from qpdmm.graph import generate_geometric_graph
from qpdmm.problem import ConsensusProblem, LeastSquaresProblem

SEED = 0
N = 30


@pytest.fixture(scope="session")
def graph30():
    return generate_geometric_graph(N, SEED)


@pytest.fixture(scope="session")
def consensus30():
    return ConsensusProblem.random(N, rng.substream(SEED, rng.DATA))


@pytest.fixture(scope="session")
def ls30():
    return LeastSquaresProblem.random(N, rng.substream(SEED, rng.DATA))


_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one ``[criterion N] PASS/FAIL`` line and echo it."""
    lines = request.config.stash[_LINES]

    def record(label, ok, detail):
        line = f"[criterion {label}] {'PASS' if ok else 'FAIL'} {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: (int(s.split()[1].rstrip("]").split(".")[0]), s)):
            terminalreporter.write_line(line)
