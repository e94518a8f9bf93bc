import os

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("ci", max_examples=30, deadline=None)
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    from remixsep.separator import SeparatorConfig

    return SeparatorConfig(n_out=3, hidden_width=8, n_blocks=2, kernel_size=3, fft_size=32, win_size=32, hop=8)
