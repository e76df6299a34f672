import pytest
from hypothesis import HealthCheck, settings

from pvgf.scenarios import ScenarioSpace, generate_corpus

settings.register_profile("pvgf", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pvgf")

SMALL_CORPUS_SEED = 3


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A dozen simulated cases shared by the featurize and CLI tests."""
    return generate_corpus(ScenarioSpace(), 12, SMALL_CORPUS_SEED,
                           tmp_path_factory.mktemp("corpus"))


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion for the end-of-run summary."""
    def emit(criterion, ok, detail, seconds):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} {criterion}: {detail} "
                                f"[{seconds:.2f} s]")
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
