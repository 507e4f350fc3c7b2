import pytest

from latent_augment.config import ExperimentConfig

SMALL = {
    "seed": 3,
    "dataset": {"num_classes": 4, "dim": 6, "n_max": 80, "imbalance": 20, "test_per_class": 25},
    "encoder": {"hidden": [16], "latent_dim": 4, "epochs": 8, "batch_size": 32},
    "diffusion": {"T": 50, "hidden": [16], "time_dim": 8, "class_dim": 4, "epochs": 6, "reverse_steps": 10},
    "finetune": {"epochs": 5, "batch_size": 32},
    "eval": {"low": 10, "high": 40},
}


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    """A config that runs the whole pipeline in well under a second."""
    return ExperimentConfig.from_dict(SMALL)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one summary line per acceptance criterion, printed at the end of the run."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
