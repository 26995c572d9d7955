import numpy as np
import pytest

from exposnet.dataset import AreaSample
from exposnet.model import ModelConfig


def random_sample(rng, grid=32, n_bsa=3, lat=48.85, lon=2.35):
    inputs = rng.random((15, grid, grid)).astype(np.float32)
    targets = rng.uniform(0.05, 1.0, 16).astype(np.float32)
    heights = np.sort(rng.uniform(10, 50, n_bsa))[::-1]
    return AreaSample(lat, lon, inputs, targets, heights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_samples():
    def make(n, seed=0, grid=32, n_bsa=3):
        rng = np.random.default_rng(seed)
        return [random_sample(rng, grid, n_bsa, 48.85 + 1e-4 * i, 2.35) for i in range(n)]
    return make


@pytest.fixture
def tiny_config():
    """A model small enough for whole-network tests on 32 x 32 tiles."""
    def make(option="per_frequency", **kw):
        return ModelConfig(option=option, **kw).slim(16)
    return make


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    import contextlib

    log = request.config.stash.setdefault(ACCEPTANCE, [])

    @contextlib.contextmanager
    def record(number, title):
        note = {"detail": ""}
        try:
            yield note
        except BaseException:
            log.append((number, "FAIL", title, note["detail"]))
            raise
        log.append((number, "PASS", title, note["detail"]))
    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(log, key=lambda r: r[0]):
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
