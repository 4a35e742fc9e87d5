import numpy as np
import pytest
import torch

from crseg.config import ExperimentConfig
from crseg.phantom import PhantomConfig, generate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """Six 16^3 subjects with 10 frames each, two labeled frames per subject."""
    cfg = PhantomConfig(grid_size=(16, 16, 16), num_frames=10, num_subjects=6, label_fraction=0.2, seed=3)
    return generate_cohort(cfg)


@pytest.fixture(scope="session")
def small_series(small_cohort):
    return [s.series for s in small_cohort]


@pytest.fixture
def tiny_config(tmp_path):
    """A configuration that trains in a couple of seconds."""
    return ExperimentConfig(seg_width=4, seg_depth=2, reg_width=4, reg_depth=2, epochs=2, batch_size=4,
                            warmup_epochs=1, learning_rate=1e-3, num_folds=3, reg_epochs=1,
                            reg_steps_per_epoch=2, reg_batch_size=2, out_dir=str(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance outcome; printed as a single line at the end of the session."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
