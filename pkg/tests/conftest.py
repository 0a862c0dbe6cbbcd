import pytest

from netlens.network import make_synthetic_network
from netlens.prng import SplitMix64

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.append((marker.args[0], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")


@pytest.fixture
def synthetic_net(tmp_path):
    def build(seed=0, depth=2, channels=(3, 4), **kw):
        net, files = make_synthetic_network(seed, depth, list(channels), tmp_path / f"net{seed}", **kw)
        return net

    return build


def random_image(seed, shape=(3, 16, 16)):
    n = 1
    for s in shape:
        n *= s
    return SplitMix64(seed).uniform(n).reshape(shape)
