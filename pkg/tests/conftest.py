import numpy as np
import pytest

from uniabg.feature_store import EmbeddingSet, ViewTag, default_ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_set(x: np.ndarray, view=ViewTag.DRONE) -> EmbeddingSet:
    return EmbeddingSet(np.asarray(x, dtype=np.float64), default_ids(view, len(x)), view)
