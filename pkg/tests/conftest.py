import numpy as np
import pytest

from qhefl import ckks


@pytest.fixture(scope="session")
def paper_ctx():
    return ckks.gen_context(ckks.PAPER)


@pytest.fixture(scope="session")
def paper_keys(paper_ctx):
    return ckks.keygen(paper_ctx, np.random.default_rng(1234))


@pytest.fixture(scope="session")
def toy_ctx():
    return ckks.gen_context(ckks.TOY)


@pytest.fixture(scope="session")
def toy_keys(toy_ctx):
    return ckks.keygen(toy_ctx, np.random.default_rng(99), galois_steps=(1,))


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, line = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} {line}")
