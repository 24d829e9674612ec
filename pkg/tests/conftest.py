import numpy as np
import pytest

from protoseg.data import LabeledSample
from protoseg.model import EncoderConfig


def random_sample(rng, size=(24, 24), n_class=6, p_ignore=0.1, name="s"):
    mask = rng.integers(0, n_class, size=size).astype(np.uint8)
    mask[rng.random(size) < p_ignore] = 255
    image = rng.random((*size, 3)).astype(np.float32)
    return LabeledSample(image=image, mask=mask, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_config():
    # two blocks, stride 2, small refinement head: fast and fully featured
    return EncoderConfig(block_channels=[4, 6], dilations=[1, 1],
                         downsample_after=frozenset({1}), frm_output_dim=8,
                         pyramid_bin_sizes=[1, 2], frm_tap_block=1)
