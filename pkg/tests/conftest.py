import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from rolesum.corpus import build_vocabulary, encode_example, generate_synthetic_corpus

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def dialogues():
    return generate_synthetic_corpus(12, seed=3)


@pytest.fixture(scope="session")
def vocab(dialogues):
    return build_vocabulary(dialogues)


@pytest.fixture(scope="session")
def examples(dialogues, vocab):
    return [encode_example(d, vocab) for d in dialogues]


@pytest.fixture(scope="session")
def small_vocab_examples(dialogues):
    """Examples encoded with a vocabulary built from a few dialogues, so source OOVs occur."""
    vocab = build_vocabulary(dialogues[:2])
    return vocab, [encode_example(d, vocab, max_input=60, max_output=12) for d in dialogues]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
