import numpy as np
import pytest

from ctsynth.data import CTSlice


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_slice(rng, h=32, w=32, lo=-1024, hi=3071, case_id="case-0"):
    hu = rng.integers(lo, hi + 1, size=(h, w), dtype=np.int64).astype(np.int16)
    return CTSlice(hu=hu, case_id=case_id)


@pytest.fixture
def slice_factory(rng):
    def make(**kw):
        return random_slice(rng, **kw)

    return make
