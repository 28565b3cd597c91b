import numpy as np
import pytest

from addernet.tensor import RngState


@pytest.fixture
def rng():
    return RngState(1234)


def fresh_rng(seed: int = 1234) -> RngState:
    return RngState(seed)
