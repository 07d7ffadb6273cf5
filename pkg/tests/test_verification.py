import pytest

from services import verification_service as vs
from services.noise_schedule import NoiseSchedule


@pytest.fixture
def sched():
    return NoiseSchedule()


def test_posterior_collapse():
    result = vs.check_posterior_collapse(n_grid=8)
    assert result.passed and result.value <= 1e-12


def test_ladder_bound_and_mass(sched):
    assert vs.check_objective_ladder(2, sched, seed=1).passed
    assert vs.check_variational_bound(3, sched, seed=1, T_list=(2, 4)).passed
    assert vs.check_dp_mass(2, sched, seed=1).passed


def test_continuous_checks(sched):
    assert vs.check_continuous_tightness(sched, seed=4).passed
    assert vs.check_schedule_invariance(2, seed=4).passed


def test_sampler_checks(sched):
    result = vs.check_sampler_distribution(20_000, sched, seed=2, n_models=1)
    assert result.passed, result.detail
    assert vs.check_cache_equivalence(5, sched, seed=2).passed
    assert vs.check_semi_ar(sched, seed=2).passed


def test_rate_and_gradient_checks(sched):
    assert vs.check_score_equivalence(100, sched, seed=3).passed
    assert vs.check_first_order(sched).passed
    assert vs.check_gradient_fidelity(2, seed=3).passed


def test_low_discrepancy_and_accounting():
    assert vs.check_low_discrepancy(1000, seed=0).passed
    result = vs.check_token_accounting()
    assert result.passed and result.value == 32_768_000_000
