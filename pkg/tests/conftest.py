import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "CRITERION_LINES", None) if module else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_channel(rng, m, n, alpha=1.0):
    return rng.dirichlet(alpha * np.ones(n), size=m)


def random_trace(rng, m=3, n=8, t=12, doc_id="doc"):
    from rsa_detect.scoring import EnsembleTrace

    dist = rng.dirichlet(np.ones(n), size=(t, m))
    observed = rng.integers(0, n, size=t)
    ids = tuple(f"model{j}" for j in range(m))
    return EnsembleTrace(doc_id, ids, observed, dist)
