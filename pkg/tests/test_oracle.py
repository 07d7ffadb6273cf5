import itertools
import math

import numpy as np
import pytest

from services.denoiser import BayesDenoiser, DataDistribution, RandomTableDenoiser
from services.errors import DomainError, TooLarge
from services.oracle import (
    any_order_nll,
    bound_gap_report,
    check_tiny,
    data_marginal,
    entropy_rate,
    exact_model_nll,
    model_distribution,
    model_path,
    order_nll,
    total_variation,
)


def test_single_token_uniform_model(vocab2, sched):
    den = BayesDenoiser(DataDistribution.uniform(vocab2, 1))
    for T in (1, 4):
        assert exact_model_nll([1], den, T, sched) == pytest.approx(math.log(2.0), abs=1e-12)


def test_model_path_shape(sched):
    alphas, times = model_path(3, sched)
    np.testing.assert_allclose(alphas, [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)
    assert len(times) == 4


@pytest.mark.parametrize("T", [1, 3, 8])
def test_model_mass_is_conserved(random_subs, sched, T):
    alphas, times = model_path(T, sched)
    p = model_distribution(random_subs, 3, alphas, times)
    assert p.sum() == pytest.approx(1.0, abs=1e-10)
    marginal = data_marginal(random_subs, 3, T, sched)
    for x, px in zip(marginal.sequences, marginal.probs):
        assert exact_model_nll(x, random_subs, T, sched) == pytest.approx(-math.log(px), abs=1e-10)


def test_nelbo_bounds_the_exact_likelihood(random_subs, vocab2, sched):
    for x in itertools.product((0, 1), repeat=3):
        rows = bound_gap_report(list(x), random_subs, [1, 2, 4, 8], sched)
        assert all(row.gap >= -1e-9 for row in rows)
    timed = RandomTableDenoiser(vocab2, 2, seed=4, time_conditioned=True)
    assert all(row.gap >= -1e-9 for row in bound_gap_report([0, 1], timed, [2, 5], sched))


def test_oracle_guards(vocab2, sched):
    with pytest.raises(TooLarge):
        check_tiny(3, 5, 4)
    with pytest.raises(TooLarge):
        check_tiny(3, 2, 100)
    loose = RandomTableDenoiser(vocab2, 2, seed=0, subs=False)
    with pytest.raises(DomainError):
        exact_model_nll([0, 1], loose, 2, sched)


def test_entropy_and_chain_rule(vocab2, tiny_dist):
    assert entropy_rate(DataDistribution.uniform(vocab2, 3)) == pytest.approx(3 * math.log(2.0))
    bayes = BayesDenoiser(tiny_dist)
    x = tiny_dist.sequences[5]
    for order in ([0, 1, 2], [2, 0, 1]):
        assert order_nll(x, bayes, order) == pytest.approx(-tiny_dist.log_prob(x), abs=1e-10)
    assert any_order_nll(x, bayes) == pytest.approx(-tiny_dist.log_prob(x), abs=1e-10)


def test_order_nll_needs_time_free(vocab2):
    timed = RandomTableDenoiser(vocab2, 2, seed=0, time_conditioned=True)
    with pytest.raises(DomainError):
        order_nll([0, 1], timed, [0, 1])


def test_total_variation():
    assert total_variation([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5)
    assert total_variation([0.2, 0.8], [0.2, 0.8]) == 0.0
