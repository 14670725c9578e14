"""
Pytest configuration and fixtures.

Everything runs on CPU against tiny encoders and a seeded synthetic
dataset, so the default run needs no downloads. End-to-end checks are
marked slow; run them with `pytest -m slow`.
"""

import pytest
import torch

from takws.models.schemas import (
    AugmentationConfig,
    BatchComposition,
    EncoderConfig,
    OptimizerConfig,
    PretrainConfig,
    TextEncoderConfig,
)
from takws.services.data import Corpus, InMemoryFrontend, make_toy_dataset
from takws.services.training import pretrain_toy

TINY_MELS = 12
TINY_FRAMES = 32


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy end-to-end runs (minutes on CPU)")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless they were selected with -m."""
    if config.getoption("-m"):
        return
    skip = pytest.mark.skip(reason="slow; run with -m slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config() -> EncoderConfig:
    """channels=16 encoder; small enough for finite-difference checks."""
    return EncoderConfig(
        n_mels=TINY_MELS,
        channels=16,
        res2_scale=4,
        attn_channels=8,
        embed_dim=8,
        se_channels=4,
    )


@pytest.fixture
def tiny_text_config() -> TextEncoderConfig:
    return TextEncoderConfig(embed_dim=8, char_dim=8, hidden=16, n_layers=1)


@pytest.fixture(scope="session")
def toy_data():
    """4 keywords x 30 utterances (18 train / 6 valid / 6 test) plus 10 noise clips."""
    return make_toy_dataset(n_keywords=4, n_per_keyword=30, seed=7, n_noise=10, n_mels=TINY_MELS, frames=TINY_FRAMES)


@pytest.fixture
def toy_corpus(toy_data) -> Corpus:
    manifest, features = toy_data
    return Corpus(manifest, InMemoryFrontend(features), frames=TINY_FRAMES)


@pytest.fixture(scope="session")
def toy_pair(toy_data):
    """Model pair from a short toy pre-training run, shared by the session."""
    manifest, features = toy_data
    corpus = Corpus(manifest, InMemoryFrontend(features), frames=TINY_FRAMES)
    config = PretrainConfig(
        encoder=EncoderConfig(
            n_mels=TINY_MELS, channels=16, res2_scale=4, attn_channels=8, embed_dim=8, se_channels=4
        ),
        text=TextEncoderConfig(embed_dim=8, char_dim=8, hidden=16, n_layers=1),
        epochs=10,
        steps_per_epoch=4,
        groups_per_batch=3,
    )
    return pretrain_toy(corpus, config, AugmentationConfig(enabled=False), seed=0)


@pytest.fixture
def quick_optimizer() -> OptimizerConfig:
    return OptimizerConfig(lr=1e-2, epochs=3, lr_halving_period_epochs=1, batches_per_epoch=1)


@pytest.fixture
def small_batch() -> BatchComposition:
    return BatchComposition.scaled(16)


@pytest.fixture
def light_augmentation() -> AugmentationConfig:
    return AugmentationConfig(expansion_factor=1)


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "out"
    path.mkdir()
    return path


@pytest.fixture
def fixed_batch(tiny_config):
    """Fixed feature batch for output comparisons."""
    return torch.randn(3, TINY_FRAMES, tiny_config.n_mels, generator=torch.Generator().manual_seed(5))
