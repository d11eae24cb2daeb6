import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "almlab",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "almlab"))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_bundle():
    from almlab.adaptation import FreezeConfig, LoraConfig
    from almlab.model import build_bundle

    return build_bundle(seed=0, lora=LoraConfig(), freeze=FreezeConfig())


@pytest.fixture
def tiny_samples():
    from almlab.data import SynthSpec, synth_dataset

    return synth_dataset(SynthSpec(n_clips=6, formats=["mc"], clip_seconds=0.5), seed=0)
