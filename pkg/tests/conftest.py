import os
import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("fehmm", max_examples=40, deadline=None)
settings.load_profile("fehmm")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
