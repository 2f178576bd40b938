import dataclasses

import numpy as np
import pytest

from scenecast.nets import ModelConfig, JointModel
from scenecast.synthgen import SceneConfig, generate_sequence, CLASS_TABLES


# Small enough that a joint forward+backward runs in well under a second,
# big enough that every stride-2 stage still divides evenly.
TINY_SCENE = SceneConfig(
    height=32, width=32, sequence_length=8, num_shapes=2, max_speed=2,
    annotate_every=3, seed=7,
)

TINY_MODEL = ModelConfig(history_len=4, num_classes=8, base_channels=8,
                         encoder_blocks=2, branch_blocks=1)


@pytest.fixture(scope="session")
def desk8():
    return CLASS_TABLES["desk8"]


@pytest.fixture(scope="session")
def tiny_sample():
    return generate_sequence(TINY_SCENE)


@pytest.fixture(scope="session")
def tiny_samples():
    return [
        generate_sequence(dataclasses.replace(TINY_SCENE, seed=s))
        for s in (11, 12, 13)
    ]


@pytest.fixture()
def tiny_model():
    return JointModel(TINY_MODEL, init_seed=3)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
