import numpy as np
import pytest
import torch

from mfishseg.data import LabelCoding, MfishSample
from mfishseg.network import BlockSpec, NetworkConfig
from mfishseg.synth import SynthConfig, generate_dataset


@pytest.fixture
def coding():
    return LabelCoding()


@pytest.fixture
def tiny_net_config():
    """Scaled-down architecture for fast training tests."""
    return NetworkConfig(
        front_stages=[
            BlockSpec("conv", kernel=3, filters=8, repeat=2),
            BlockSpec("maxpool", kernel=2, stride=2),
            BlockSpec("conv", kernel=3, filters=16, repeat=2),
            BlockSpec("maxpool", kernel=2, stride=2),
        ],
        aspp_branches=[
            BlockSpec("conv1x1", kernel=1, filters=16),
            BlockSpec("aspp_branch", kernel=3, dilation=2, filters=16),
            BlockSpec("global_pool", kernel=1, filters=16),
        ],
        fuse_filters=16,
    )


@pytest.fixture(scope="session")
def synth_samples():
    return generate_dataset(SynthConfig(n_images=4, height=64, width=64,
                                        seed=7))


def make_sample(labels: np.ndarray, coding=None, sample_id="T000",
                rng=None) -> MfishSample:
    """Sample whose channel intensities are a deterministic function of the
    label code, so classes are spectrally separable."""
    from mfishseg.synth import class_signatures
    coding = coding or LabelCoding()
    rng = rng or np.random.default_rng(0)
    h, w = labels.shape
    sig = class_signatures()
    channels = np.zeros((6, h, w), dtype=np.float32)
    for i, code in enumerate(coding.chromosome_codes):
        sel = labels == code
        channels[:, sel] = sig[i][:, None]
    sel = labels == coding.overlap_code
    channels[:, sel] = 0.5
    return MfishSample(id=sample_id, channels=channels, labels=labels)
