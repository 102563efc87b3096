import numpy as np
import pytest

from relightlab.config import DataConfig, EstimatorConfig, SceneBounds
from relightlab.datagen import generate_dataset

# acceptance criteria registry: test_acceptance records one entry per criterion,
# printed as a summary block at the end of the run
_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status} - {detail}")


@pytest.fixture(scope="session")
def small_bounds() -> SceneBounds:
    return SceneBounds()


@pytest.fixture(scope="session")
def tiny_records(small_bounds):
    cfg = DataConfig(n_samples=12, programs_per_scene=2, bounds=small_bounds)
    return generate_dataset(cfg, seed=7)


@pytest.fixture(scope="session")
def quick_estimator(tiny_records):
    """A cheap, unenforced estimator for plumbing tests (quality irrelevant)."""

    from relightlab.geometry import train_estimator

    cfg = EstimatorConfig(iterations=50, channels=8, enforce_thresholds=False, seed=0)
    est, _ = train_estimator(tiny_records, cfg)
    return est
