import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bifuse.data import make_synthetic_pairs


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """16 synthetic ivif pairs at 48x48, shared by training-style tests."""
    root = tmp_path_factory.mktemp("synth") / "data"
    make_synthetic_pairs(root, n_pairs=16, size=48, seed=11, task="ivif")
    return root


@pytest.fixture(scope="session")
def holdout_root(tmp_path_factory):
    """4 held-out pairs from a different seed, same recipe."""
    root = tmp_path_factory.mktemp("synth_holdout") / "data"
    make_synthetic_pairs(root, n_pairs=4, size=48, seed=977, task="ivif")
    return root
