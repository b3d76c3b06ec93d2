from pathlib import Path

import pytest

from bias_rescore.datagen import GenConfig, InventorySizes
from bias_rescore.model import ModelConfig, MultiTaskLM
from bias_rescore.tokenizer import build_vocab
from bias_rescore.training import BASE_ALPHABET


DATA_DIR = Path(__file__).parent.parent / "test-data"
CONFIG_DIR = Path(__file__).parent.parent / "configs"


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def vocab():
    """Lowercase letters, digits and space."""
    return build_vocab([BASE_ALPHABET])


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(
        vocab_size=vocab.vocab_size,
        d_model=16,
        n_layers=2,
        n_heads=2,
        d_ff=32,
        max_seq_len=128,
        dropout=0.0,
        seed=0,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return MultiTaskLM(tiny_config).eval()


@pytest.fixture
def small_gen_config():
    return GenConfig(
        n_train=30,
        n_test=10,
        inventory=InventorySizes(PER=40, LOC=40, ORG=40),
        biasing_list_size=3,
        seed=7,
    )
