from pathlib import Path

import numpy as np
import pytest

from contact.encoder import EncoderConfig, init_params
from contact.model import ModelState
from contact.tokenizer import train_bpe

FIXTURES = Path(__file__).parent / "fixtures"

TINY_CORPUS = [
    "de prik beschermt tegen het virus",
    "morgen haal ik mijn vaccin bij de dokter",
    "de lockdown duurt nog twee weken",
    "@USER bedankt voor de info over de prik",
    "veel mensen twijfelen nog over het vaccin",
    "de avondklok gaat vanavond weer in",
]


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def tiny_vocab():
    return train_bpe(TINY_CORPUS, vocab_size=150)


@pytest.fixture(scope="session")
def tiny_config(tiny_vocab):
    return EncoderConfig(
        n_layers=2, n_heads=2, d_model=16, d_ff=32, max_positions=32,
        vocab_size=len(tiny_vocab), dropout_rate=0.1,
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)


@pytest.fixture()
def tiny_model(tiny_params, tiny_vocab):
    return ModelState(params=tiny_params.copy(), vocab=tiny_vocab)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
