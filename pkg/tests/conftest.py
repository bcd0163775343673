import pytest

from speclab.fixtures import random_pair


@pytest.fixture
def pair7():
    """Fixture #1: seeded (target, draft) pair, vocab 4, order 1, divergence 0.5."""
    return random_pair(7)
