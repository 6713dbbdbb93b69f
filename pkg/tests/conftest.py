import numpy as np
import pytest
from hypothesis import settings

from robustpe.corpus_gen import MALWARE_SIGNAL, GenSpec, detection_config, generate_pe, iter_corpus

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


def malicious(seed: int, **kw) -> bytes:
    return generate_pe(GenSpec(seed=seed, label="malicious", signal=MALWARE_SIGNAL, **kw))


def benign(seed: int, **kw) -> bytes:
    return generate_pe(GenSpec(seed=seed, **kw))


@pytest.fixture(scope="session")
def small_corpus():
    """40 benign and 40 malicious files with their manifest rows."""
    return list(iter_corpus(detection_config(40, 40, seed=11)))


@pytest.fixture(scope="session")
def donor_files(small_corpus):
    return [data for row, data in small_corpus if row.label == "benign"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return check
