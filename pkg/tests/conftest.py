import time
from pathlib import Path

import pytest

from kmex import cli, data, nn

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class ToyRun:
    """A toy model trained through the CLI, with its dataset directory."""

    def __init__(self, root: Path):
        self.root = root
        self.model_path = root / "model.json"
        self.data_dir = root / "data"
        self.model = nn.load_model(self.model_path)
        train, test = data.load_dataset_dir(self.data_dir)
        self.train, self.test = train, test


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    """The full-size toy setup (3 classes, 2000/500 images, seed 42)."""
    root = tmp_path_factory.mktemp("toy")
    start = time.perf_counter()
    assert cli.main(["train-toy", "--out", str(root), "--seed", "42"]) == 0
    run = ToyRun(root)
    run.train_seconds = time.perf_counter() - start
    return run


@pytest.fixture(scope="session")
def small_run(tmp_path_factory) -> ToyRun:
    """A quick, lightly trained model for CLI plumbing tests."""
    root = tmp_path_factory.mktemp("small")
    assert cli.main(["train-toy", "--out", str(root), "--seed", "3", "--n-train", "150",
                     "--n-test", "60", "--epochs", "2", "--attributes"]) == 0
    return ToyRun(root)
