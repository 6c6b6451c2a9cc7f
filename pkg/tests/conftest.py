import os
from pathlib import Path

import pytest

_CANDIDATES = [os.environ.get("ROTVAE_MNIST_DIR", ""), "data/mnist", "/root/data/mnist"]


def find_mnist():
    for c in _CANDIDATES:
        if c and (Path(c) / "train-labels-idx1-ubyte").exists() or c and (Path(c) / "train-labels-idx1-ubyte.gz").exists():
            return Path(c)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = find_mnist()
    if d is None:
        pytest.skip("MNIST IDX files not found; set ROTVAE_MNIST_DIR")
    return d


TINY = dict(
    dataset="synthetic", num_domains=3, num_styles=2, image_size=16, samples_per_cell=5, num_sizes=1,
    num_positions=1, conv_channels=(4, 8), dim_l=4, dim_u=4, batch_size=8, epochs=2,
)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A two-epoch model on a 30-image synthetic set: ``(config, dataset, TrainResult, out_dir)``."""
    from rotvae.trainer import TrainConfig, load_dataset, train

    config = TrainConfig(**TINY)
    data = load_dataset(config)
    out = tmp_path_factory.mktemp("tiny_run")
    return config, data, train(config, data, out), out


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
