import numpy as np
import pytest

from imsm.model import MarkovChain, MsmModel
from imsm.transitions import random_transition


def random_spd(rng, m, scale=1.0):
    A = rng.standard_normal((m, m))
    return scale * (A @ A.T / m + 0.5 * np.eye(m))


def random_model(K, m, seed, kind="linear", diagonal=False, **opts):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(K))
    Q = rng.dirichlet(np.ones(K), size=K)
    return MsmModel(
        chain=MarkovChain(pi, Q),
        init_mean=rng.standard_normal((K, m)),
        init_cov=np.stack([random_spd(rng, m, 0.5) for _ in range(K)]),
        trans_mean=tuple(random_transition(kind, m, rng, **opts) for _ in range(K)),
        noise_cov=np.stack([random_spd(rng, m, 0.3) for _ in range(K)]),
        diagonal=diagonal,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
