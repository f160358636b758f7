import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from manyiv.dataset import IVDataset

SEED = 20240601

settings.register_profile(
    "manyiv", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("manyiv")


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keep calibration caches out of the user's home directory."""
    path = tmp_path / "cache"
    monkeypatch.setenv("MANYIV_CACHE", str(path))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


def random_dataset(gen, n, K, p=1, strength=0.1):
    Z = gen.standard_normal((n, K))
    V = gen.standard_normal((n, p))
    Y = Z @ (strength * gen.standard_normal((K, p))) + V
    y = Y @ np.ones(p) + 0.5 * V[:, 0] + gen.standard_normal(n)
    return IVDataset(y=y, Y=Y, Z=Z)


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, 200, 20)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
