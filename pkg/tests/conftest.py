import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from probensemble.wire import ContributionMessage


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_contribution(client_id, sample_ids, probs, round_=1):
    return ContributionMessage(client_id=client_id, round=round_,
                               sample_ids=np.asarray(sample_ids, dtype=np.uint64),
                               probs=np.asarray(probs, dtype=np.float64))


def random_simplex_rows(rng, n, c):
    raw = rng.dirichlet(np.ones(c), size=n)
    return raw / raw.sum(axis=1, keepdims=True)
