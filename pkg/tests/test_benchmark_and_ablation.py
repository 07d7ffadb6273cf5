import numpy as np
import pytest

from services.ablation_service import (
    ablate_objective_ladder,
    ablate_schedules,
    ablate_steps,
    ablate_time_conditioning,
)
from services import corpus_service
from services.benchmark_service import bench_caching
from services.denoiser import BayesDenoiser, ContextBagDenoiser, DataDistribution, RandomTableDenoiser
from services.noise_schedule import DEFAULT_EPS, DEFAULT_SIGMA_MAX, NoiseSchedule
from services.training_service import TrainerConfig


@pytest.fixture
def two_point(vocab2):
    """All-zero or all-one lines of length 3, equally likely."""
    return DataDistribution.from_support(vocab2, [[0, 0, 0], [1, 1, 1]])


def test_caching_benchmark(random_subs, sched):
    rows = bench_caching(random_subs, 3, [8, 32], n_seq=3, sched=sched, seed=1, repetitions=1)
    assert [r.T for r in rows] == [8, 32]
    for row in rows:
        assert row.identical
        assert row.calls_uncached == 3 * row.T
        assert row.calls_cached <= row.calls_uncached
        assert row.max_calls_cached_per_seq <= 4


def test_objective_ladder_ablation(sched):
    rows = ablate_objective_ladder(4, sched, seed=2)
    assert len(rows) == 4
    for row in rows:
        assert abs(row.d3pm_full - row.rb2_rb1) <= 1e-12
        assert row.d3pm_full_unconstrained >= row.rb2 - 1e-12
        assert 1 <= row.T <= 8 and 1 <= row.L <= 3


def test_schedule_ablation_agrees_for_time_free(two_point):
    rows = ablate_schedules(BayesDenoiser(two_point), two_point.sequences, DEFAULT_SIGMA_MAX, DEFAULT_EPS,
                            n_nodes=32)
    assert len(rows) == 4
    means = [r.nats_per_token for r in rows]
    assert max(means) - min(means) < 1e-3


def test_schedule_ablation_reports_time_conditioned_spread(vocab2):
    den = RandomTableDenoiser(vocab2, 2, seed=5, time_conditioned=True)
    rows = ablate_schedules(den, np.array([[0, 1], [1, 1]]), 10.0, DEFAULT_EPS, n_nodes=16)
    assert {r.schedule for r in rows} == {"log_linear", "cosine", "cosine_squared", "linear"}


def test_steps_ablation_tightens_with_T(two_point, sched):
    rows = ablate_steps(BayesDenoiser(two_point), two_point.sequences, [2, 8], sched, n_draws=2000, seed=0)
    assert [r.T for r in rows] == ["2", "8", "inf"]
    assert rows[0].ppl > rows[1].ppl > rows[2].ppl
    # continuous time recovers the true log 2 per sequence
    assert rows[2].nats_per_token == pytest.approx(np.log(2.0) / 3, abs=0.02)


def test_time_conditioning_ablation(vocab2, sched):
    corpus = np.repeat(np.array([[0], [1]] * 50), 3, axis=1)
    cfg = TrainerConfig(d_emb=4, d_hidden=8, steps=20, batch_size=8, lr=0.02, warmup_steps=2, log_every=0)
    rows, delta = ablate_time_conditioning(corpus, corpus[:4], vocab2, sched, cfg, n_samples=2, seed=1)
    assert [r.time_conditioning for r in rows] == [False, True]
    assert delta == pytest.approx(abs(rows[1].ppl - rows[0].ppl))


def test_step_sweep_on_trained_markov_model(markov_bundle, markov_trained):
    _, paths = markov_bundle
    vocab = corpus_service.load_bundle(paths["corpus"])[1]
    lines = corpus_service.read_corpus(paths["eval"], vocab)[:64]
    denoiser = ContextBagDenoiser(markov_trained.params, vocab)
    rows = ablate_steps(denoiser, lines, [10, 100, 1000], NoiseSchedule(), n_draws=8, seed=0)
    assert [r.T for r in rows] == ["10", "100", "1000", "inf"]
    ppls = [r.ppl for r in rows]
    assert all(1.0 < p < vocab.k_data for p in ppls)
    assert ppls[-1] <= min(ppls) * 1.005
