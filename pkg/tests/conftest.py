# tests/conftest.py

import os
import sys

import numpy as np
import pytest

# Add the root of the repo to Python path so `services`, `cli` and `config` resolve
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from services import corpus_service  # noqa: E402
from services.categorical import Vocabulary, make_rng  # noqa: E402
from services.denoiser import DataDistribution, RandomTableDenoiser  # noqa: E402
from services.noise_schedule import NoiseSchedule, ScheduleKind  # noqa: E402
from services.training_service import TrainerConfig, train  # noqa: E402


@pytest.fixture
def vocab2():
    """Two data tokens (0, 1) and the mask at index 2."""
    return Vocabulary.with_data_size(2)


@pytest.fixture
def vocab4():
    return Vocabulary.with_data_size(4)


@pytest.fixture
def vocab6():
    return Vocabulary.with_data_size(6)


@pytest.fixture
def sched():
    return NoiseSchedule(kind=ScheduleKind.LOG_LINEAR)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def random_subs(vocab2):
    """Time-free SUBS denoiser with random logits per latent, L = 3."""
    return RandomTableDenoiser(vocab2, 3, seed=7)


@pytest.fixture
def tiny_dist(vocab2):
    """Random full-support distribution over the 8 data sequences of length 3."""
    seqs = DataDistribution.enumerate_sequences(vocab2, 3)
    probs = make_rng(99).dirichlet(np.ones(len(seqs)))
    return DataDistribution(vocab2, 3, seqs, probs)


# ---------------------------------------------------------------------------
# Trained markov1 model, shared by the slower end-to-end tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def markov_bundle(tmp_path_factory):
    """markov1 generator over 6 tokens at length 16, with its corpus bundle on disk."""
    gen = corpus_service.build_generator("markov1", 6, 16, seed=0)
    paths = corpus_service.gen_corpus(gen, 2000, 200, seed=0, out_dir=tmp_path_factory.mktemp("markov"))
    return gen, paths


@pytest.fixture(scope="session")
def markov_trained(markov_bundle):
    _, paths = markov_bundle
    corpus, vocab, _ = corpus_service.load_bundle(paths["corpus"])
    return train(corpus, vocab, NoiseSchedule(), TrainerConfig(seed=0))
