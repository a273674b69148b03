import numpy as np
import pytest

from expertfuse.clinicsim import generate
from expertfuse.toy_policy import PolicyConfig, ToyTransformer


@pytest.fixture(scope="session")
def small_ds():
    return generate(11, per_domain_count=40, noise_rate=0.05)


@pytest.fixture(scope="session")
def small_model(small_ds):
    return ToyTransformer(PolicyConfig(vocab_size=small_ds.vocab.size, d_model=16, n_layers=1, n_heads=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(key: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[key] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
