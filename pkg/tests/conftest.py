import numpy as np
import pytest

from solar.providers import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(patch_grid=(4, 4), text_length=12, seed=5)
    return cfg, synth_generate(cfg, 8)
