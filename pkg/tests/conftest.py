import numpy as np
import pytest

from retrieval_zsl.feature_store import SynthConfig, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(SynthConfig(num_seen=4, num_unseen=2, instances_per_class=30,
                                      Dv=6, Dt=5, T=2, latent_dim=4, noise_sigma=0.3, seed=7))


# The setup used by the qualitative reproduction checks: 8 seen / 4 unseen
# classes, noise chosen so the unrescaled model favours seen classes.
PILOT_SYNTH = SynthConfig(num_seen=8, num_unseen=4, instances_per_class=40, Dv=32, Dt=24, T=4,
                          latent_dim=8, noise_sigma=0.6, seed=0)


@pytest.fixture(scope="session")
def pilot_synth():
    return synth_generate(PILOT_SYNTH)
