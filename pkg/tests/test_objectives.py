import math

import numpy as np
import pytest

from services.categorical import make_rng
from services.denoiser import BayesDenoiser, DataDistribution, RandomTableDenoiser
from services.errors import DomainError, InvalidSteps, TooLarge
from services.noise_schedule import ALL_KINDS, NoiseSchedule
from services.objectives import (
    ObjectiveKind,
    ObjectiveVariant,
    coupled_nelbo_ladder,
    diffusion_loss_discrete,
    kl_term_unsimplified,
    low_discrepancy_times,
    nelbo_continuous,
    nelbo_mc,
    nelbo_quadrature,
    prior_loss,
    reconstruction_loss,
)
from services.oracle import any_order_nll

DISCRETE_KINDS = (ObjectiveKind.D3PM_FULL, ObjectiveKind.RB2, ObjectiveKind.RB2_RB1)
LOG2 = math.log(2.0)


@pytest.fixture
def uniform_bayes(vocab2):
    return BayesDenoiser(DataDistribution.uniform(vocab2, 3))


@pytest.mark.parametrize("T", [1, 2, 5, 16])
def test_discrete_ladder_agrees_under_subs(random_subs, sched, T):
    x = [0, 1, 0]
    values = [diffusion_loss_discrete(ObjectiveVariant(kind=k, T=T), x, random_subs, sched, exhaustive=True)
              for k in DISCRETE_KINDS]
    assert max(values) - min(values) < 1e-12


def test_discrete_ladder_agrees_for_time_conditioned_denoiser(vocab2, sched):
    den = RandomTableDenoiser(vocab2, 2, seed=3, time_conditioned=True)
    values = [diffusion_loss_discrete(ObjectiveVariant(kind=k, T=6), [1, 0], den, sched, exhaustive=True)
              for k in DISCRETE_KINDS]
    assert max(values) - min(values) < 1e-12


@pytest.mark.parametrize("T", [1, 3, 10])
@pytest.mark.parametrize("kind", DISCRETE_KINDS)
def test_uniform_data_costs_log2_per_token_at_every_T(uniform_bayes, sched, kind, T):
    value = diffusion_loss_discrete(ObjectiveVariant(kind=kind, T=T), [1, 0, 1], uniform_bayes, sched,
                                    exhaustive=True)
    assert value == pytest.approx(3 * LOG2, abs=1e-12)


def test_uniform_data_continuous(uniform_bayes, sched):
    assert nelbo_quadrature([0, 0, 1], uniform_bayes, sched).value == pytest.approx(3 * LOG2, abs=1e-3)
    est = nelbo_mc([0, 0, 1], uniform_bayes, sched, n=2000, rng=make_rng(2))
    assert est.value == pytest.approx(3 * LOG2, abs=max(5 * est.std_error, 0.05))


def test_kl_term_hand_values(vocab2):
    xout = np.array([math.log(0.25), math.log(0.75), -np.inf])
    assert kl_term_unsimplified(xout, 1, 2, 0.6, 0.2, vocab2) == pytest.approx(-0.5 * math.log(0.75))
    assert kl_term_unsimplified(xout, 1, 1, 0.6, 0.2, vocab2) == 0.0
    with pytest.raises(DomainError):
        kl_term_unsimplified(xout, 1, 2, 0.2, 0.2, vocab2)


def test_kl_term_with_mask_mass_is_nonnegative(vocab2):
    xout = np.log(np.array([0.2, 0.5, 0.3]))
    for alpha_s, alpha_t in [(0.9, 0.1), (0.5, 0.4), (1.0, 0.0)]:
        assert kl_term_unsimplified(xout, 0, 2, alpha_s, alpha_t, vocab2) >= -1e-12


def test_prior_and_reconstruction(vocab2, sched):
    one = BayesDenoiser(DataDistribution.uniform(vocab2, 1))
    assert prior_loss([0], 5) == 0.0
    assert reconstruction_loss([0], one, 3, sched, exhaustive=True) == pytest.approx(LOG2 / 4)
    assert reconstruction_loss([0], one, math.inf, sched) == 0.0
    with pytest.raises(DomainError):
        reconstruction_loss([0], one, 3, sched)


def test_variant_validation(random_subs, sched):
    with pytest.raises(ValueError):
        ObjectiveVariant(kind=ObjectiveKind.RB2)
    with pytest.raises(DomainError):
        diffusion_loss_discrete(ObjectiveVariant(), [0, 1, 0], random_subs, sched, exhaustive=True)
    with pytest.raises(DomainError):
        diffusion_loss_discrete(ObjectiveVariant(kind=ObjectiveKind.RB2, T=4), [0, 1, 0], random_subs, sched)


def test_continuous_matches_any_order_likelihood(random_subs, sched):
    x = [1, 1, 0]
    assert nelbo_quadrature(x, random_subs, sched).value == pytest.approx(any_order_nll(x, random_subs),
                                                                          abs=1e-3)


def test_continuous_is_schedule_invariant(random_subs):
    values = [nelbo_quadrature([0, 1, 1], random_subs, NoiseSchedule(kind=k)).value for k in ALL_KINDS]
    assert max(values) - min(values) < 1e-3


def test_mc_is_unbiased_against_quadrature(random_subs, sched):
    n = 100_000
    quad = nelbo_quadrature([0, 1, 0], random_subs, sched, n_nodes=128)
    mc = nelbo_continuous([0, 1, 0], random_subs, sched, mode="mc", n=n, rng=make_rng(8))
    assert mc.n_samples == n
    assert abs(mc.value - quad.value) < 3 * mc.std_error
    with pytest.raises(DomainError):
        nelbo_continuous([0, 1, 0], random_subs, sched, mode="trapezoid")


def test_discrete_nelbo_approaches_continuous_for_two_point_data(vocab2, sched):
    two_point = BayesDenoiser(DataDistribution.from_support(vocab2, [[0, 0, 0], [1, 1, 1]]))
    quad = nelbo_quadrature([1, 1, 1], two_point, sched, n_nodes=128).value
    assert quad == pytest.approx(LOG2, abs=1e-7)
    gaps = []
    for T in (4, 16, 64, 256):
        N = T + 1
        value = diffusion_loss_discrete(ObjectiveVariant(kind=ObjectiveKind.RB2_RB1, T=T), [1, 1, 1],
                                        two_point, sched, exhaustive=True)
        # right Riemann sum of 3 log2 p^2 on a grid of N cells
        assert value == pytest.approx(LOG2 * (N + 1) * (2 * N + 1) / (2 * N * N), abs=1e-9)
        gaps.append(abs(value - quad))
    assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_discrete_nelbo_gap_shrinks_with_T(vocab4, sched, seed):
    den = RandomTableDenoiser(vocab4, 2, seed=seed)
    x = [seed % 4, (seed + 1) % 4]
    quad = nelbo_quadrature(x, den, sched, n_nodes=128).value
    gaps = []
    for T in (4, 16, 64, 256):
        value = diffusion_loss_discrete(ObjectiveVariant(kind=ObjectiveKind.RB2_RB1, T=T), x, den, sched,
                                        exhaustive=True)
        gaps.append(abs(value - quad))
    assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < gaps[0]


def test_quadrature_guard(vocab4, sched):
    den = RandomTableDenoiser(vocab4, 6, seed=0)
    with pytest.raises(TooLarge):
        nelbo_quadrature([0] * 6, den, sched)


def test_low_discrepancy_times_cover_every_stratum():
    t = low_discrepancy_times(10, make_rng(0), eps=1e-5)
    strata = np.floor(np.sort(t) * 10).astype(int)
    np.testing.assert_array_equal(strata, np.arange(10))
    with pytest.raises(InvalidSteps):
        low_discrepancy_times(0, make_rng(0))


def test_coupled_ladder_on_uniform_data(uniform_bayes):
    out = coupled_nelbo_ladder([0, 1, 1], uniform_bayes, [2, 8], make_rng(6), n_draws=2000)
    assert set(out) == {"2", "8", "inf"}
    for draws in out.values():
        assert draws.shape == (2000,)
        assert draws.mean() == pytest.approx(3 * LOG2, abs=0.15)


def test_coupled_ladder_needs_time_free(vocab2):
    den = RandomTableDenoiser(vocab2, 2, seed=1, time_conditioned=True)
    with pytest.raises(DomainError):
        coupled_nelbo_ladder([0, 1], den, [4], make_rng(0))
