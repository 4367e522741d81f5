from pathlib import Path

import pytest

from cfaug.classifier import TrainConfig, train
from cfaug.corpus import build_vocab, generate_synthetic

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def synth_train():
    return generate_synthetic(500, seed=1)


@pytest.fixture(scope="session")
def synth_test():
    return generate_synthetic(100, seed=1, split="test")


@pytest.fixture(scope="session")
def vocab(synth_train):
    return build_vocab(synth_train)


@pytest.fixture(scope="session")
def trained(synth_train, vocab):
    params, history = train(synth_train, vocab, TrainConfig(seed=1))
    return params, history


@pytest.fixture(scope="session")
def mini_semeval():
    return FIXTURES / "mini_semeval.xml"
