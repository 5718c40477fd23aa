import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from meev.body_model import make_toy_model  # noqa: E402


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
