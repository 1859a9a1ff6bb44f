"""
Shared fixtures: a tiny backbone (32x32 input, 4x4 grid) that keeps every
test fast, seeded images and the built-in synonym library.
"""

import pytest
import torch

import numerics
from config import AdaptationConfig
from mini_vlm import ModelConfig, build_model
from scenes import builtin_library

TINY = ModelConfig(image_size=32, patch_size=8, embed_dim=16, num_blocks=2, num_heads=2, vocab_size=256, seed=7)
TINY_ADAPTATION = AdaptationConfig(window=32, stride=16)
CATEGORIES = ['background', 'building', 'road']
# the TINY backbone and a one-scene suite as a settings file
TINY_SUITE_CONF = (
    "image_size = 32\npatch_size = 8\nembed_dim = 16\nnum_blocks = 2\nnum_heads = 2\n"
    "vocab_size = 256\nmodel_seed = 7\nwindow = 32\nstride = 16\n"
    "scenes = 1\nsize = 32,32\nclasses = 3\n"
)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (deselect with -m 'not slow')")


@pytest.fixture(autouse=True)
def _single_thread():
    numerics.configure_threads(1)


@pytest.fixture(scope='session')
def tiny_model():
    return build_model(TINY)


@pytest.fixture(scope='session')
def flat_model():
    """Tiny backbone without positional embeddings (exactly rotation-equivariant)."""
    return build_model(TINY.model_copy(update={'positional_embeddings': False}))


@pytest.fixture
def tiny_settings():
    return TINY_ADAPTATION


@pytest.fixture(scope='session')
def library():
    return builtin_library()


@pytest.fixture
def categories():
    return list(CATEGORIES)


def random_image(seed: int, size: int = 32, width: int = None) -> torch.Tensor:
    return numerics.seeded_rng(seed).child('image').uniform((size, width or size, 3))


@pytest.fixture
def image():
    return random_image(0)
