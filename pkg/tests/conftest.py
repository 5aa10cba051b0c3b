import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Six patients per class, two visits each, 16x16x16 volumes."""
    from volseq.data import generate_synthetic_cohort

    out = tmp_path_factory.mktemp("cohort")
    generate_synthetic_cohort(out, 6, shape=(16, 16, 16), visits=2, seed=3)
    return out / "manifest.tsv"
