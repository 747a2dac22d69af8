import sys

import numpy as np
import pytest
import torch

from crrn.synthesis import SynthesisConfig, generate_dataset, make_procedural_pool


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pools(tmp_path_factory):
    root = tmp_path_factory.mktemp("pools")
    make_procedural_pool(root / "bg", 6, seed=11, kind="background", height=72, width=100)
    make_procedural_pool(root / "rf", 6, seed=11, kind="reflection", height=72, width=100)
    return root / "bg", root / "rf"


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory, pools):
    """Eight 32x64 triplets; small enough for quick training smoke tests."""
    out = tmp_path_factory.mktemp("small_data")
    cfg = SynthesisConfig(seed=5, count=8, resolutions=["32x64", "64x32"])
    generate_dataset(cfg, pools[0], pools[1], out)
    return out / "manifest.json"


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
