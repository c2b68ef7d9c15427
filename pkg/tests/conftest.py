import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from retinagen.detector import (BlockSpec, ConvSpec, DetectorConfig,
                                build_detector, desk_config)


def toy_config(input_size=8, channels=(4,), pool=None):
    """Small no-norm config whose forward pass a direct-summation oracle can chase."""
    pool = pool or [2] * len(channels)
    blocks = [BlockSpec(convs=[ConvSpec(ch)], pool_kernel=pk, pool_stride=pk)
              for ch, pk in zip(channels, pool)]
    return DetectorConfig(input_size=input_size, blocks=blocks,
                          bottleneck_channels=channels[-1], batch_norm=False)


@pytest.fixture
def toy_detector():
    """Single block, 8x8 input, 8x8 pool straight to the bottleneck."""
    return build_detector(toy_config(8, channels=(4,), pool=[8]), seed=11)


@pytest.fixture
def two_block_detector():
    return build_detector(toy_config(8, channels=(3, 5), pool=[2, 4]), seed=7)


@pytest.fixture
def desk_detector():
    return build_detector(desk_config(64, 64), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    """Desk-scale checkpoints plus sample inputs shared by CLI/service tests."""
    from pipeline_fixture import build_sample_dir

    return build_sample_dir(tmp_path_factory.mktemp("pipeline"))
