import numpy as np
import pytest
import torch

from multirater.data import GenConfig, generate_dataset, load_dataset
from multirater.network import NetworkConfig

torch.set_num_threads(1)


@pytest.fixture
def toy_config():
    return NetworkConfig(depth=2, base_channels=4, num_branches=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(GenConfig(num_cases=6, image_size=32, se_radius=1, seed=3), root)
    return root


@pytest.fixture(scope="session")
def small_cases(small_dataset):
    return load_dataset(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
