import numpy as np
import pytest

from ppmn.config import ModelConfig
from ppmn.data import SyntheticSpec, generate_synthetic


def small_model_config(variant="sc", **kw):
    base = dict(variant=variant, sc_widths=(4, 4, 4, 4), sc_channels=8, ctm_widths=(4, 4),
                ctm_channels=8, branch_channels=4, fuse_channels=4, head_width=16)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(SyntheticSpec(n_identities=6, seed=11))


@pytest.fixture
def pair_images(tiny_dataset):
    a = np.stack([tiny_dataset.images(i, "A")[0].image for i in (0, 1)])
    b = np.stack([tiny_dataset.images(0, "B")[0].image] * 2)
    return a, b
