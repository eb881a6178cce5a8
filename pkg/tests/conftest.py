import numpy as np
import pytest

from neurogram.datasets import GeneratorConfig, synth_generate
from neurogram.grammar import default_grammar, default_outer, desk_grammar, desk_outer


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def outer():
    return default_outer()


@pytest.fixture(scope="session")
def small_space():
    return desk_grammar(), desk_outer()


@pytest.fixture(scope="session")
def bundle():
    """Default generator, 1000 events per class."""
    return synth_generate(1000, 1000, rng=0)


@pytest.fixture(scope="session")
def tiny_bundle():
    cfg = GeneratorConfig(split=(0.6, 0.1, 0.15, 0.15))
    return synth_generate(120, 120, rng=5, config=cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record and print one pass/fail line per acceptance criterion."""
    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
