import math

import numpy as np
import pytest

from services.categorical import Vocabulary, make_rng
from services.denoiser import (
    BayesDenoiser,
    ContextBagDenoiser,
    DataDistribution,
    RandomTableDenoiser,
    TrainingBatch,
    check_gradients,
    exact_bayes_denoiser,
    init_params,
    loss_and_grad,
    subs_wrap,
)
from services.errors import DomainError, ShapeError, TooLarge, UnreachableLatent


def test_subs_carries_over_unmasked_tokens(vocab2):
    raw = make_rng(0).normal(size=(2, 3))
    out = subs_wrap(raw, np.array([0, 2]), vocab2)
    np.testing.assert_allclose(np.exp(out[0]), [1.0, 0.0, 0.0])
    assert np.exp(out[1, 2]) == 0.0
    assert np.exp(out[1]).sum() == pytest.approx(1.0)


def test_subs_uniform_logits_on_masked_position(vocab2):
    out = subs_wrap(np.zeros((1, 3)), np.array([2]), vocab2)
    np.testing.assert_allclose(np.exp(out[0]), [0.5, 0.5, 0.0])


def _fuzz_denoiser(kind: str, rng):
    vocab = Vocabulary.with_data_size(int(rng.integers(2, 5)))
    L = int(rng.integers(1, 5))
    seed = int(rng.integers(0, 2 ** 31))
    if kind == "context_bag":
        tc = bool(rng.integers(0, 2))
        return ContextBagDenoiser(init_params(vocab, L, 4, 6, seed=seed), vocab, time_conditioned=tc)
    if kind == "bayes":
        seqs = DataDistribution.enumerate_sequences(vocab, L)
        return BayesDenoiser(DataDistribution(vocab, L, seqs, rng.dirichlet(np.ones(len(seqs)))))
    return RandomTableDenoiser(vocab, L, seed=seed, time_conditioned=bool(rng.integers(0, 2)))


@pytest.mark.parametrize("kind", ["context_bag", "bayes", "random_table"])
def test_subs_holds_for_every_denoiser(kind):
    rng = make_rng(17)
    for _ in range(20):
        den = _fuzz_denoiser(kind, rng)
        mask = den.vocab.mask_index
        for _ in range(500):
            z = np.where(rng.random(den.length) < 0.5, mask, rng.integers(0, den.vocab.k_data, den.length))
            out = den.predict(z, float(rng.random()))
            probs = np.exp(out)
            assert np.all(probs[:, mask] == 0.0)
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
            visible = np.flatnonzero(z != mask)
            assert np.all(out[visible, z[visible]] == 0.0)


def test_zero_params_give_uniform_output(vocab4):
    model = ContextBagDenoiser(init_params(vocab4, 5, 4, 6, seed=0, zero=True), vocab4)
    probs = np.exp(model.predict(np.full(5, vocab4.mask_index)))
    np.testing.assert_allclose(probs[:, :4], 0.25)
    np.testing.assert_allclose(probs[:, 4], 0.0)


def test_predict_is_deterministic_and_time_sensitive(vocab4):
    params = init_params(vocab4, 4, 4, 6, seed=3)
    params.w_time[:] = 0.5
    z = np.array([0, 4, 4, 2])
    free = ContextBagDenoiser(params, vocab4)
    timed = ContextBagDenoiser(params, vocab4, time_conditioned=True)
    assert np.array_equal(free.predict(z), ContextBagDenoiser(params.copy(), vocab4).predict(z))
    assert not np.allclose(free.predict(z), timed.predict(z, 0.7))
    with pytest.raises(DomainError):
        timed.predict(z)


def test_wrong_length_is_rejected(vocab4):
    model = ContextBagDenoiser(init_params(vocab4, 4, 4, 6, seed=1), vocab4)
    with pytest.raises(ShapeError):
        model.predict(np.array([0, 1, 2]))


def test_loss_counts_only_masked_positions(vocab2):
    params = init_params(vocab2, 2, 3, 4, seed=0, zero=True)
    batch = TrainingBatch(x=np.array([[0, 1]]), z=np.array([[2, 1]]), t=np.array([0.5]),
                          weight=np.array([-2.0]))
    loss, _ = loss_and_grad(params, batch, vocab2, time_conditioned=False)
    assert loss == pytest.approx(-2.0 * math.log(0.5))


@pytest.mark.parametrize("time_conditioned", [False, True])
def test_gradients_match_finite_differences(vocab4, time_conditioned):
    rng = make_rng(11)
    params = init_params(vocab4, 3, 5, 6, seed=2)
    x = rng.integers(0, 4, size=(6, 3))
    z = np.where(rng.random((6, 3)) < 0.6, vocab4.mask_index, x)
    batch = TrainingBatch(x=x, z=z, t=rng.uniform(0.05, 0.95, 6), weight=rng.uniform(-3.0, -0.5, 6))
    assert check_gradients(params, batch, vocab4, time_conditioned, max_coords=60, rng=rng) < 1e-4


def test_bayes_denoiser_conditions_on_visible_tokens(vocab2):
    dist = DataDistribution.from_support(vocab2, [[0, 0], [1, 1]], [0.25, 0.75])
    bayes = BayesDenoiser(dist)
    np.testing.assert_allclose(np.exp(bayes.predict(np.array([2, 2])))[:, :2], [[0.25, 0.75], [0.25, 0.75]])
    np.testing.assert_allclose(np.exp(bayes.predict(np.array([1, 2])))[1], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(exact_bayes_denoiser(dist, np.array([2, 0]))[0], bayes.predict([2, 0])[0])
    with pytest.raises(UnreachableLatent):
        bayes.predict(np.array([0, 1]))


def test_bayes_denoiser_is_uniform_on_uniform_data(vocab2):
    bayes = BayesDenoiser(DataDistribution.uniform(vocab2, 3))
    np.testing.assert_allclose(np.exp(bayes.predict(np.array([2, 0, 2])))[[0, 2], :2], 0.5)


def test_data_distribution_guard(vocab4):
    with pytest.raises(TooLarge):
        DataDistribution.enumerate_sequences(vocab4, 12)


def test_random_table_is_reproducible(vocab2):
    a = RandomTableDenoiser(vocab2, 3, seed=5)
    b = RandomTableDenoiser(vocab2, 3, seed=5)
    z = np.array([2, 0, 2])
    np.testing.assert_array_equal(a.predict(z), b.predict(z))
    free = RandomTableDenoiser(vocab2, 3, seed=5, subs=False)
    assert np.all(np.isfinite(free.predict(z)))
    timed = RandomTableDenoiser(vocab2, 3, seed=5, time_conditioned=True)
    assert not np.allclose(timed.predict(z, 0.1), timed.predict(z, 0.9))
