import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctgossip.merkle_log import HmacSigner, MerkleLog  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture
def signer():
    return HmacSigner(b"fixture-key")


@pytest.fixture
def log(signer):
    return MerkleLog("pilot", signer)


@pytest.fixture
def data_dir():
    return DATA
