import random

import pytest

from assured import crypto


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xA55)


@pytest.fixture
def oem_key() -> crypto.SigningKeyPair:
    return crypto.signing_key_from_seed(bytes(range(32)))
