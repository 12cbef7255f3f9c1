import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# (label, passed, detail) lines collected by the acceptance tests
CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def record(label: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
        print(line)
        CRITERIA.append((label, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for label, passed, detail in CRITERIA:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {label}: {detail}")


def _run(cfg, out):
    from crossview.pipeline import run_pipeline

    return run_pipeline(cfg, out)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Full pipeline on the default synthetic benchmark (about 8 minutes)."""
    from crossview.pipeline import PipelineConfig

    return _run(PipelineConfig(), tmp_path_factory.mktemp("default"))


@pytest.fixture(scope="session")
def repeat_run(tmp_path_factory):
    """Same seed again, stopping after the single-scale stages."""
    from crossview.pipeline import PipelineConfig

    return _run(PipelineConfig(multi=None), tmp_path_factory.mktemp("repeat"))


@pytest.fixture(scope="session")
def variant_run(tmp_path_factory):
    """Ground views draw context from a random depth spanning the z18 to z16 coverage."""
    from crossview.pipeline import PipelineConfig
    from crossview.synthworld import WorldSpec

    return _run(PipelineConfig(world=WorldSpec(ground_depth=(100.0, 400.0))), tmp_path_factory.mktemp("variant"))
