import random
from pathlib import Path

import pytest

from adchain import cryptokit

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "adchain" / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def keypair_1024() -> cryptokit.KeyPair:
    # deterministic and shared: RSA generation is the slow part of the suite
    return cryptokit.generate_keypair(1024, rng_seed=1001)


@pytest.fixture(scope="session")
def keypair_1024_b() -> cryptokit.KeyPair:
    return cryptokit.generate_keypair(1024, rng_seed=1002)


@pytest.fixture(scope="session")
def keypair_512() -> cryptokit.KeyPair:
    return cryptokit.generate_keypair(512, rng_seed=1003)


@pytest.fixture()
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
