import math

import numpy as np
import pytest

from services.categorical import (
    Vocabulary,
    as_token_seq,
    log_prob_of,
    make_rng,
    sample_categorical,
    sample_categorical_rows,
    spawn_rngs,
    validate_simplex,
)
from services.errors import DataContainsMask, InvalidDistribution, MaskQueryError, ShapeError


def test_point_masses_always_return_their_index():
    rng = make_rng(0)
    assert all(sample_categorical([1.0, 0.0, 0.0], rng) == 0 for _ in range(50))
    assert all(sample_categorical([0.0, 0.0, 1.0], rng) == 2 for _ in range(50))


def test_empirical_frequency_matches_probability():
    rng = make_rng(5)
    P = np.tile([0.5, 0.5, 0.0], (100_000, 1))
    draws = sample_categorical_rows(P, rng)
    assert abs(np.mean(draws == 0) - 0.5) < 0.01
    assert not np.any(draws == 2)


def test_same_seed_same_stream():
    a = [sample_categorical([0.2, 0.3, 0.5], make_rng(42)) for _ in range(3)]
    b = [sample_categorical([0.2, 0.3, 0.5], make_rng(42)) for _ in range(3)]
    assert a == b
    first, second = spawn_rngs(3, 2)
    assert first.random() != second.random()


@pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0], []])
def test_invalid_simplex_is_rejected(p):
    with pytest.raises(InvalidDistribution):
        validate_simplex(p)


def test_log_prob_of_hand_values():
    assert log_prob_of([0.0, 0.0], 0) == pytest.approx(math.log(0.5), abs=1e-12)
    assert log_prob_of([math.log(3.0), 0.0], 0) == pytest.approx(math.log(0.75), abs=1e-12)
    assert log_prob_of([0.0, -np.inf, -np.inf], 0) == pytest.approx(0.0, abs=1e-15)


def test_log_prob_of_mask_query_raises():
    with pytest.raises(MaskQueryError):
        log_prob_of([0.0, 0.0, -np.inf], 2, mask_index=2)


def test_vocabulary_conventions(tmp_path, vocab2):
    assert vocab2.K == 3 and vocab2.mask_index == 2
    assert list(vocab2.data_tokens) == [0, 1]
    path = tmp_path / "vocab.txt"
    vocab2.to_file(path)
    assert path.read_text().splitlines()[-1] == "<mask>"
    assert Vocabulary.from_file(path) == vocab2
    assert vocab2.detokenize([0, 1, 2]) == "t0 t1 <mask>"


def test_vocabulary_file_without_mask_is_rejected(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("a\nb\n")
    with pytest.raises(InvalidDistribution):
        Vocabulary.from_file(path)


def test_token_sequence_kinds(vocab2):
    assert list(as_token_seq([0, 2, 1], vocab2)) == [0, 2, 1]
    with pytest.raises(DataContainsMask):
        as_token_seq([0, 2], vocab2, kind="data")
    with pytest.raises(ShapeError):
        as_token_seq([0, 3], vocab2)
