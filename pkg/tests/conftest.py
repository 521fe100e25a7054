import numpy as np
import pytest

from minimm.adapter import AdapterConfig
from minimm.decoder import DecoderConfig
from minimm.encoder import EncoderConfig
from minimm.llm import LlmConfig
from minimm.model import ModelConfig
from minimm.refiner import RefinerConfig
from minimm.vae import VaeConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**refiner_kw):
    """A minimal-but-complete model config for fast wiring tests."""
    return ModelConfig(
        encoder=EncoderConfig(patch_size=14, base_grid=8, layers=1, heads=2, hidden_dim=32),
        adapter=AdapterConfig(compression=2, visual_vocab=32, llm_dim=48),
        llm=LlmConfig(layers=2, heads=2, llm_dim=48, text_vocab=64, max_seq=128),
        refiner=RefinerConfig(blocks=1, cond_dim=32, heads=2, **refiner_kw),
        decoder=DecoderConfig(layers=1, heads=2, hidden=32, cond_dim=32),
        vae=VaeConfig(base_channels=4),
    )
