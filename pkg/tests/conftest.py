from __future__ import annotations

import numpy as np
import pytest

from quip.corpus import Vocabulary
from quip.encoder import EncoderConfig

WORDS = ("the cat sat on a mat . who what when where ? marie curie discovered radium in 1898 paris "
         "is person location be to of and that have i good bad movie why it").split()


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary.build([WORDS])


@pytest.fixture
def tiny_config(vocab) -> EncoderConfig:
    return EncoderConfig(vocab_size=len(vocab), d=8, n_layers=2, n_heads=2, ffn_width=16, dropout_rate=0.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# a run config small enough to push every stage through in a couple of seconds
SMALL_RUN = {
    "seed": 0,
    "encoder": {"d": 16, "n_layers": 2, "n_heads": 2, "ffn_width": 32},
    "data": {"n_passages": 8},
    "teacher": {"epochs": 1, "n_gold_passages": 8},
    "paraphrase": {"fine_tune_epochs": 2},
    "ner": {"epochs": 2},
}


@pytest.fixture
def small_config_file(tmp_path):
    import yaml

    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL_RUN), encoding="utf-8")
    return path
