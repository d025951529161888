import numpy as np
import pytest

from fectek.encoder import EncoderConfig
from fectek.tokenizer import Vocabulary

TINY_TEXTS = [
    "the quick brown fox jumps over the lazy dog",
    "pack my box with five dozen liquor jugs",
    "how vexingly quick daft zebras jump",
    "sphinx of black quartz judge my vow",
]


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary.build(TINY_TEXTS)


@pytest.fixture
def tiny_config() -> EncoderConfig:
    return EncoderConfig(
        dim=16,
        layers=2,
        heads=2,
        ffn_multiplier=2,
        max_query_len=16,
        max_passage_len=24,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
