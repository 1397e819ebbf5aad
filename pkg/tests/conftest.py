import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from synthcorpus import ScriptSpec, make_dataset, write_corpus  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training/eval tests")


@pytest.fixture(autouse=True)
def _default_torch_threads():
    # individual tests may pin to 1 thread; reset before each test
    torch.set_num_threads(2)
    yield


@pytest.fixture()
def toy_dataset():
    """5 classes x 4 instances, one script, in memory."""
    return make_dataset([ScriptSpec("toyscript", 5, 4)], seed=11)


@pytest.fixture()
def two_script_dataset():
    return make_dataset(
        [ScriptSpec("first", 3, 20), ScriptSpec("second", 3, 20, style="angular")],
        seed=13,
    )


@pytest.fixture()
def corpus_root(tmp_path):
    """2-script toy corpus on disk: 3 classes x 20 instances each script."""
    root = tmp_path / "corpus"
    write_corpus(
        root,
        [ScriptSpec("first", 3, 20), ScriptSpec("second", 3, 20, style="angular")],
        seed=13,
    )
    return root


def random_unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
